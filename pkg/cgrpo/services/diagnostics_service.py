"""Runtime checks behind the convergence argument.

Each ``check_*`` returns a plain flag; ``ConvergenceMonitor`` runs them
during training, counts violations and assembles the ConvergenceReport.
"""

from __future__ import annotations

import logging
import math
from typing import List, Optional, Sequence

import numpy as np
import numpy.typing as npt

from ..errors import ArgumentError
from ..models.envs import EnvSpec
from ..models.grpo import AdvantageBuffer
from ..models.metrics import ConvergenceReport, ScheduleReport

logger = logging.getLogger(__name__)

ADVANTAGE_TOLERANCE = 1e-9
STEP_TOLERANCE = 1e-6
LOG_FLOOR = 1e-12
PROBE_STATES = 32
TREND_WINDOW = 100
# log gradient norm may grow by at most 0.5% per iteration over the trailing window
STATIONARITY_TOLERANCE = 5e-3


def check_reward_bound(reward: float, reward_bound: float) -> bool:
    return abs(reward) <= reward_bound


def check_advantage_bound(buffer: AdvantageBuffer) -> bool:
    """Per group: max |Â| <= max |A - mu_g| / (sigma_g + delta)."""
    for g in range(len(buffer.mu)):
        mask = buffer.group_index == g
        if not np.any(mask):
            continue
        a_max = np.max(np.abs(buffer.raw[mask] - buffer.mu[g]))
        limit = a_max / (buffer.sigma[g] + buffer.delta) + ADVANTAGE_TOLERANCE
        if np.max(np.abs(buffer.normalized[mask])) > limit:
            return False
    return True


def check_normalization(buffer: AdvantageBuffer, mean_tol: float = 1e-6, std_tol: float = 1e-3) -> bool:
    """Zero mean per group; unit std where sigma_g is large enough for it to be reachable.

    std(Â) equals sigma_g / (sigma_g + delta), which is within 1e-3 of one only once
    sigma_g exceeds 1000 * delta.
    """
    for g in range(len(buffer.mu)):
        values = buffer.normalized[buffer.group_index == g]
        if values.size == 0:
            continue
        if abs(values.mean()) > mean_tol:
            return False
        if buffer.sigma[g] > 1e3 * buffer.delta and abs(values.std() - 1.0) > std_tol:
            return False
    return True


def output_drift(f_before: npt.ArrayLike, f_after: npt.ArrayLike) -> float:
    diff = np.asarray(f_after, dtype=np.float64) - np.asarray(f_before, dtype=np.float64)
    return float(np.max(np.linalg.norm(diff, axis=-1)))


def check_step_bound(f_before, f_after, alpha: float, grad_max: float, lipschitz: float) -> bool:
    return output_drift(f_before, f_after) <= alpha * grad_max * lipschitz * (1.0 + STEP_TOLERANCE)


def schedule_check(alpha0: float, decay: float, horizon: int) -> ScheduleReport:
    """Inspect alpha_k = alpha0 / (1 + decay k) for k < horizon."""
    if alpha0 <= 0.0:
        raise ArgumentError("alpha0 must be positive")
    if decay < 0.0:
        raise ArgumentError("decay must be non-negative")
    if horizon < 1:
        raise ArgumentError("horizon must be at least 1")
    k = np.arange(horizon, dtype=np.float64)
    alphas = alpha0 / (1.0 + decay * k)
    positive = bool(np.all(alphas > 0.0))
    decreasing = bool(horizon == 1 or np.all(np.diff(alphas) < 0.0))
    violations = []
    if not positive:
        violations.append("schedule has non-positive step sizes")
    if not decreasing:
        violations.append("schedule is not strictly decreasing")
    # harmonic decay: sum alpha diverges, sum alpha^2 converges iff decay > 0
    robbins_monro = decay > 0.0
    if not robbins_monro:
        violations.append("constant step size: sum of alpha_k^2 diverges")
    return ScheduleReport(
        alpha0=alpha0,
        decay=decay,
        horizon=horizon,
        positive=positive,
        strictly_decreasing=decreasing,
        sum_alpha=float(alphas.sum()),
        sum_alpha_sq=float(np.sum(alphas * alphas)),
        robbins_monro=robbins_monro,
        violations=violations,
    )


def stationarity_trend(history: Sequence[float], window: int) -> float:
    """Least-squares slope of log(norm) against iteration over the trailing window."""
    if window < 1 or window > len(history):
        raise ArgumentError(f"window {window} does not fit a history of length {len(history)}")
    y = np.log(np.asarray(history[-window:], dtype=np.float64) + LOG_FLOOR)
    x = np.arange(window, dtype=np.float64)
    xc = x - x.mean()
    denom = float(np.sum(xc * xc))
    if denom == 0.0:
        return 0.0
    return float(np.sum(xc * (y - y.mean())) / denom)


class ConvergenceMonitor:
    """Accumulates per-iteration diagnostics for one training run."""

    def __init__(self, spec: EnvSpec, grad_max: float):
        self.spec = spec
        self.grad_max = grad_max
        self.report = ConvergenceReport()
        self._iteration_drift = 0.0

    @property
    def lipschitz(self) -> float:
        return self.report.lipschitz_estimate

    def observe_rewards(self, rewards: npt.ArrayLike) -> int:
        r = np.asarray(rewards, dtype=np.float64)
        bad = int(np.sum(np.abs(r) > self.spec.reward_bound))
        if bad:
            logger.error("%d rewards exceed the %s bound %.4f", bad, self.spec.name, self.spec.reward_bound)
        self.report.reward_violations += bad
        return bad

    def observe_advantages(self, buffer: AdvantageBuffer) -> None:
        if not check_advantage_bound(buffer):
            logger.error("normalized advantages exceed their group bound")
            self.report.advantage_violations += 1
        if not check_normalization(buffer):
            logger.error("group normalization contract broken")
            self.report.normalization_violations += 1

    def observe_step(self, f_before, f_after, parameter_step: float, alpha: float) -> bool:
        """Fold the measured sensitivity into the Lipschitz proxy, then check the drift bound."""
        drift = output_drift(f_before, f_after)
        if parameter_step > 0.0:
            self.report.lipschitz_estimate = max(self.report.lipschitz_estimate, drift / parameter_step)
        self._iteration_drift = max(self._iteration_drift, drift)
        ok = check_step_bound(f_before, f_after, alpha, self.grad_max, self.report.lipschitz_estimate)
        if not ok:
            logger.error("policy output drift %.3e exceeds the step bound", drift)
            self.report.step_violations += 1
        return ok

    def end_iteration(self, grad_norm: float, alpha: float) -> None:
        self.report.grad_norms.append(grad_norm)
        self.report.max_drifts.append(self._iteration_drift)
        self.report.alphas.append(alpha)
        self._iteration_drift = 0.0

    def finalize(self, alpha0: float, decay: float, horizon: int, window: Optional[int] = None) -> ConvergenceReport:
        """Fit the gradient-norm trend and judge it once a full ``window`` of history exists."""
        history: List[float] = self.report.grad_norms
        requested = window or TREND_WINDOW
        if history:
            w = min(requested, len(history))
            self.report.trend_window = w
            self.report.trend_slope = stationarity_trend(history, w)
            if len(history) >= requested:
                self.report.stationary = self.report.trend_slope <= STATIONARITY_TOLERANCE
        self.report.schedule = schedule_check(alpha0, decay, horizon)
        if not math.isfinite(self.report.trend_slope or 0.0):
            logger.warning("stationarity trend is not finite")
        elif self.report.stationary is False:
            logger.warning(
                "gradient norms still grow: log-slope %.3e over %d iterations",
                self.report.trend_slope, self.report.trend_window,
            )
        return self.report
