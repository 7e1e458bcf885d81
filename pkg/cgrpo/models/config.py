"""Run configuration: pydantic models plus the flat ``key = value`` file format."""

from __future__ import annotations

import hashlib
import io
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Union

from dotenv.parser import Binding, parse_stream
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..errors import ConfigParseError, ConfigValidationError, StorageError


class Variant(Enum):
    FULL = "full"
    SIMPLE = "simple"


class GrpoConfig(BaseModel):
    """Algorithm hyperparameters."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    n_policies: int = Field(default=2, ge=1)
    n_groups: int = Field(default=2, ge=1)
    gamma: float = Field(default=0.99, gt=0.0, lt=1.0)
    eps_base: float = Field(default=0.2, gt=0.0, lt=1.0)
    delta: float = Field(default=1e-8, gt=0.0)
    lambda_s: float = Field(default=0.01, ge=0.0)
    lambda_d: float = Field(default=0.01, ge=0.0)
    tau: float = Field(default=0.9, ge=-1.0, le=1.0)
    dbscan_eps: float = Field(default=0.5, gt=0.0)
    dbscan_min_pts: int = Field(default=5, ge=1)
    alpha0: float = Field(default=3e-4, gt=0.0)
    lr_decay: float = Field(default=1e-3, ge=0.0)
    grad_clip: float = Field(default=10.0, gt=0.0)
    epochs_per_iter: int = Field(default=4, ge=1)
    minibatch_size: int = Field(default=256, ge=1)
    batch_timesteps: int = Field(default=2048, ge=1)
    horizon: int = Field(default=0, ge=0)  # 0 keeps the environment's own horizon
    hidden_size: int = Field(default=64, ge=1)
    hidden_layers: int = Field(default=2, ge=1)
    log_std_init: float = Field(default=-0.5, ge=-5.0, le=2.0)
    variant: Variant = Variant.FULL
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_relations(self) -> "GrpoConfig":
        if self.n_groups > self.n_policies:
            raise ValueError(f"n_groups ({self.n_groups}) must not exceed n_policies ({self.n_policies})")
        return self

    @property
    def hidden_sizes(self) -> List[int]:
        return [self.hidden_size] * self.hidden_layers

    def learning_rate(self, k: int) -> float:
        return self.alpha0 / (1.0 + self.lr_decay * k)


class RunConfig(GrpoConfig):
    """Hyperparameters plus everything the experiment runner needs."""

    env: str = Field(default="point_mass", pattern=r"^(point_mass|pendulum)$")
    iterations: int = Field(default=500, ge=1)
    eval_episodes: int = Field(default=100, ge=1)
    output_dir: str = "runs/default"
    checkpoint_every: int = Field(default=50, ge=1)
    rollout_workers: int = Field(default=1, ge=1)
    record_wall_time: bool = True


# Fields that do not change what the training computes; excluded from the checkpoint hash.
RUNTIME_ONLY_FIELDS = frozenset(
    {"iterations", "eval_episodes", "output_dir", "checkpoint_every", "rollout_workers", "record_wall_time"}
)


def _line_of(binding: Binding) -> int:
    # a binding's recorded line is where its leading blank lines start
    text = binding.original.string
    leading = text[: len(text) - len(text.lstrip())]
    return binding.original.line + leading.count("\n")


def parse_config_text(text: str) -> Dict[str, str]:
    """Raw string values keyed by field name; pydantic does the typing in ``build_config``."""
    fields = RunConfig.model_fields
    values: Dict[str, str] = {}
    for binding in parse_stream(io.StringIO(text)):
        number = _line_of(binding)
        if binding.error:
            raise ConfigParseError("expected 'key = value'", line=number)
        key = binding.key
        if key is None:
            continue
        if key not in fields:
            raise ConfigParseError("unknown key", line=number, key=key)
        if key in values:
            raise ConfigParseError("duplicate key", line=number, key=key)
        if not binding.value:
            raise ConfigParseError("missing value", line=number, key=key)
        values[key] = binding.value
    return values


def build_config(values: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        violations = []
        for error in exc.errors():
            where = ".".join(str(part) for part in error["loc"]) or "config"
            violations.append(f"{where}: {error['msg']}")
        raise ConfigValidationError(violations) from None


def load_config(path: Union[str, Path]) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    return build_config(parse_config_text(text))


def _format_value(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f"\"{escaped}\""
    return str(value)


def dump_config(config: RunConfig) -> str:
    lines = [f"{name} = {_format_value(getattr(config, name))}" for name in RunConfig.model_fields]
    return "\n".join(lines) + "\n"


def config_hash(config: GrpoConfig) -> str:
    """Digest of the fields that determine training results."""
    items = [
        f"{name}={_format_value(getattr(config, name))}"
        for name in sorted(type(config).model_fields)
        if name not in RUNTIME_ONLY_FIELDS
    ]
    return hashlib.sha256("\n".join(items).encode("utf-8")).hexdigest()


def with_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
    """Copy of ``config`` with fields replaced, re-validated as a whole."""
    return build_config({**config.model_dump(), **overrides})
