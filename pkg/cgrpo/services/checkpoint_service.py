"""Versioned plain-text checkpoints.

Layout: a ``cgrpo-checkpoint <version>`` line, ``key value`` header lines,
the embedded run config, then one float per line (17 significant digits) for
each policy and the reference, and the diagnostics history as one JSON line.
RNG streams are keyed by (seed, purpose, policy, iteration), so the iteration
index fully determines every stream position on resume.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Sequence, Union

import numpy as np
from pydantic import ValidationError

from ..agents.grpo_agent import AgentState
from ..errors import CheckpointError, GrpoError, StorageError
from ..models.config import RunConfig, build_config, config_hash, dump_config, parse_config_text
from ..models.envs import make_env_spec
from ..models.grpo import ReferencePolicy
from ..models.metrics import ConvergenceReport, format_float
from ..models.numerics import GaussianPolicy, parameter_count, policy_from_vector, policy_to_vector

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = "cgrpo-checkpoint"
RNG_SCHEME = "seedsequence(seed,purpose,policy,iteration)"


@dataclass(frozen=True)
class Checkpoint:
    """A parsed checkpoint: the run's config and the agent state to resume."""

    config: RunConfig
    config_hash: str
    state: AgentState


def checkpoint_path(out_dir: Union[str, Path], completed: int) -> Path:
    return Path(out_dir) / f"checkpoint_{completed:06d}.ckpt"


def expected_layer_sizes(config: RunConfig) -> List[int]:
    """Policy layer sizes implied by the config and its environment."""
    spec = make_env_spec(config.env, config.horizon)
    return [spec.observation_dim, *config.hidden_sizes, spec.action_dim]


def _vector_lines(vector: np.ndarray) -> Iterator[str]:
    return (format_float(v) for v in vector)


def render_checkpoint(config: RunConfig, state: AgentState) -> str:
    """Serialize config and state to the line-oriented text format."""
    sizes = expected_layer_sizes(config)
    config_lines = dump_config(config).splitlines()
    lines = [
        f"{MAGIC} {FORMAT_VERSION}",
        f"config_hash {config_hash(config)}",
        f"iteration {state.iteration}",
        f"seed {config.seed}",
        f"env {config.env}",
        f"n_policies {len(state.policies)}",
        f"layer_sizes {','.join(str(s) for s in sizes)}",
        f"rng_scheme {RNG_SCHEME}",
        f"parameters {parameter_count(sizes)}",
        f"config {len(config_lines)}",
        *config_lines,
    ]
    for i, policy in enumerate(state.policies):
        lines.append(f"policy {i}")
        lines.extend(_vector_lines(policy_to_vector(policy)))
    lines.append("reference")
    lines.extend(_vector_lines(policy_to_vector(state.reference.policy)))
    lines.append(f"report {state.report.model_dump_json()}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_checkpoint(path: Union[str, Path], config: RunConfig, state: AgentState) -> Path:
    """Write through a temporary file and rename it into place."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(render_checkpoint(config, state), encoding="utf-8")
        tmp.replace(path)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info("checkpoint %s at iteration %d", path.name, state.iteration)
    return path


class _Reader:
    def __init__(self, lines: Sequence[str], source: str):
        self.lines = lines
        self.pos = 0
        self.source = source

    def fail(self, detail: str) -> CheckpointError:
        return CheckpointError(f"{self.source}, line {self.pos}: {detail}")

    def next(self) -> str:
        if self.pos >= len(self.lines):
            raise self.fail("unexpected end of file")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def field(self, key: str) -> str:
        line = self.next()
        name, _, value = line.partition(" ")
        if name != key or not value:
            raise self.fail(f"expected '{key} <value>', found '{line}'")
        return value

    def floats(self, count: int) -> np.ndarray:
        try:
            return np.array([float(self.next()) for _ in range(count)], dtype=np.float64)
        except ValueError as exc:
            raise self.fail(f"bad number: {exc}") from None


def parse_checkpoint(text: str, source: str = "checkpoint") -> Checkpoint:
    """Strict inverse of render_checkpoint; errors name the offending line."""
    reader = _Reader(text.splitlines(), source)
    header = reader.next().split()
    if len(header) != 2 or header[0] != MAGIC:
        raise reader.fail("not a checkpoint file")
    if header[1] != str(FORMAT_VERSION):
        raise reader.fail(f"unsupported format version {header[1]}")

    try:
        stored_hash = reader.field("config_hash")
        iteration = int(reader.field("iteration"))
        reader.field("seed")
        reader.field("env")
        n_policies = int(reader.field("n_policies"))
        sizes = [int(s) for s in reader.field("layer_sizes").split(",")]
        rng_scheme = reader.field("rng_scheme")
        n_params = int(reader.field("parameters"))
        n_config = int(reader.field("config"))
    except ValueError as exc:
        raise reader.fail(f"bad header value: {exc}") from None
    if rng_scheme != RNG_SCHEME:
        raise reader.fail(f"unknown rng scheme '{rng_scheme}'")
    try:
        config = build_config(parse_config_text("\n".join(reader.next() for _ in range(n_config))))
    except GrpoError as exc:
        raise reader.fail(f"embedded config is invalid: {exc.detail}") from None

    if config_hash(config) != stored_hash:
        raise reader.fail("embedded config does not match its hash")
    expected = expected_layer_sizes(config)
    if sizes != expected or n_params != parameter_count(sizes) or n_policies != config.n_policies:
        raise reader.fail(
            f"architecture mismatch: file has {n_policies} x {sizes}, config implies "
            f"{config.n_policies} x {expected}"
        )

    policies: List[GaussianPolicy] = []
    for i in range(n_policies):
        if reader.next() != f"policy {i}":
            raise reader.fail(f"expected section 'policy {i}'")
        policies.append(policy_from_vector(sizes, reader.floats(n_params)))
    if reader.next() != "reference":
        raise reader.fail("expected section 'reference'")
    reference = ReferencePolicy(policy=policy_from_vector(sizes, reader.floats(n_params)))
    try:
        report = ConvergenceReport.model_validate_json(reader.field("report"))
    except ValidationError as exc:
        raise reader.fail(f"bad diagnostics record: {exc.error_count()} errors") from None
    if reader.next() != "end":
        raise reader.fail("missing end marker")

    state = AgentState(iteration=iteration, policies=policies, reference=reference, report=report)
    return Checkpoint(config=config, config_hash=stored_hash, state=state)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read and parse a checkpoint file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(text, source=str(path))


def verify_resumable(checkpoint: Checkpoint, config: RunConfig) -> None:
    """Refuse to continue under a configuration that would change what training computes."""
    digest = config_hash(config)
    if digest != checkpoint.config_hash:
        changed: Dict[str, str] = {}
        for name in type(config).model_fields:
            old, new = getattr(checkpoint.config, name), getattr(config, name)
            if old != new:
                changed[name] = f"{old} -> {new}"
        raise CheckpointError(f"checkpoint was written under a different configuration: {changed}")
    if checkpoint.state.iteration > config.iterations:
        raise CheckpointError(
            f"checkpoint is at iteration {checkpoint.state.iteration}, beyond the requested {config.iterations}"
        )
