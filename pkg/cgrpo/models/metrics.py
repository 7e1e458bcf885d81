"""Records produced by training, diagnostics, evaluation and comparison."""

from __future__ import annotations

import math
from typing import List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

CSV_COLUMNS = (
    "iteration",
    "policy_index",
    "mean_return",
    "std_return",
    "surrogate_loss",
    "smooth_loss",
    "diversity_loss",
    "group_index",
    "mu_g",
    "sigma_g",
    "eps_g",
    "state_clusters",
    "noise_frac",
    "grad_norm",
    "alpha_k",
    "wall_ms",
)


def format_float(value: float) -> str:
    # 17 significant digits round-trip IEEE-754 doubles exactly
    return format(float(value), ".17g")


class PolicyIterationStats(BaseModel):
    policy_index: int = Field(ge=0)
    mean_return: float
    std_return: float = Field(ge=0.0)
    surrogate_loss: float
    smooth_loss: float = Field(ge=0.0)
    diversity_loss: float = Field(ge=0.0)
    group_index: int = Field(ge=0)
    mu_g: float
    sigma_g: float = Field(ge=0.0)
    eps_g: float = Field(gt=0.0)
    grad_norm: float = Field(ge=0.0)


class IterationMetrics(BaseModel):
    iteration: int = Field(ge=0)
    policies: List[PolicyIterationStats]
    state_clusters: int = Field(ge=0)
    noise_frac: float = Field(ge=0.0, le=1.0)
    alpha_k: float = Field(gt=0.0)
    wall_ms: float = Field(ge=0.0)
    diversity_penalty: float = Field(ge=0.0)
    group_count: int = Field(ge=1)

    @model_validator(mode="after")
    def _all_finite(self) -> "IterationMetrics":
        numbers = [self.noise_frac, self.alpha_k, self.wall_ms, self.diversity_penalty]
        for stats in self.policies:
            numbers.extend(v for v in stats.model_dump().values() if isinstance(v, float))
        if not all(math.isfinite(v) for v in numbers):
            raise ValueError(f"iteration {self.iteration} produced non-finite metrics")
        return self

    def csv_rows(self) -> List[List[str]]:
        rows = []
        for p in self.policies:
            rows.append(
                [
                    str(self.iteration),
                    str(p.policy_index),
                    format_float(p.mean_return),
                    format_float(p.std_return),
                    format_float(p.surrogate_loss),
                    format_float(p.smooth_loss),
                    format_float(p.diversity_loss),
                    str(p.group_index),
                    format_float(p.mu_g),
                    format_float(p.sigma_g),
                    format_float(p.eps_g),
                    str(self.state_clusters),
                    format_float(self.noise_frac),
                    format_float(p.grad_norm),
                    format_float(self.alpha_k),
                    format_float(self.wall_ms),
                ]
            )
        return rows


class ScheduleReport(BaseModel):
    alpha0: float
    decay: float
    horizon: int
    positive: bool
    strictly_decreasing: bool
    sum_alpha: float
    sum_alpha_sq: float
    robbins_monro: bool
    violations: List[str] = Field(default_factory=list)


class ConvergenceReport(BaseModel):
    grad_norms: List[float] = Field(default_factory=list)
    max_drifts: List[float] = Field(default_factory=list)
    alphas: List[float] = Field(default_factory=list)
    reward_violations: int = 0
    advantage_violations: int = 0
    step_violations: int = 0
    normalization_violations: int = 0
    lipschitz_estimate: float = 0.0
    trend_window: Optional[int] = None
    trend_slope: Optional[float] = None
    # None until the history covers a full trend window
    stationary: Optional[bool] = None
    schedule: Optional[ScheduleReport] = None

    @property
    def passed(self) -> bool:
        return (
            self.reward_violations == 0
            and self.advantage_violations == 0
            and self.step_violations == 0
            and self.normalization_violations == 0
            and self.stationary is not False
        )


class PolicyEvaluation(BaseModel):
    policy_index: int
    mean_return: float
    std_return: float
    episodes: int
    # set only for perturbed evaluations: same starts under the nominal physics
    nominal_mean_return: Optional[float] = None
    return_drop: Optional[float] = None


class EvaluationSummary(BaseModel):
    env: str
    seed: int
    iteration: int
    perturbation: float = 1.0
    policies: List[PolicyEvaluation]


class ComparisonCell(BaseModel):
    variant: str
    seed: int
    status: str = "ok"
    error: Optional[str] = None
    iterations: int = 0
    final_mean_return: Optional[float] = None
    trailing_variance: Optional[float] = None
    metrics_csv: Optional[str] = None


class VariantSummary(BaseModel):
    variant: str
    runs: int
    mean_final_return: Optional[float] = None
    mean_trailing_variance: Optional[float] = None
    std_final_return: Optional[float] = None
    std_trailing_variance: Optional[float] = None


class ComparisonReport(BaseModel):
    seeds: List[int]
    window: int
    cells: List[ComparisonCell]
    summaries: List[VariantSummary]
    full_win_rate: Optional[float] = None
    full_lower_variance_rate: Optional[float] = None

    @field_validator("seeds")
    @classmethod
    def _enough_seeds(cls, seeds: List[int]) -> List[int]:
        if len(seeds) < 2:
            raise ValueError("a comparison needs at least two seeds")
        return seeds
