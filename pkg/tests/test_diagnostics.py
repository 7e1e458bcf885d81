import dataclasses
import math

import numpy as np
import pytest

from cgrpo.errors import ArgumentError
from cgrpo.models.envs import make_env_spec
from cgrpo.models.grpo import GroupAssignment, group_normalize, update_policy
from cgrpo.models.numerics import GaussianPolicy, GradientSet, MlpParams, mlp_forward
from cgrpo.services.diagnostics_service import (
    STATIONARITY_TOLERANCE,
    ConvergenceMonitor,
    check_advantage_bound,
    check_normalization,
    check_reward_bound,
    check_step_bound,
    output_drift,
    schedule_check,
    stationarity_trend,
)


def _buffer(values, delta=1e-8):
    groups = GroupAssignment(group_of_policy=(0,), group_members=((0,),), centroids=np.zeros((1, 4)))
    return group_normalize(values, [0] * len(values), groups, delta)


def test_reward_bound_is_inclusive():
    assert check_reward_bound(8.02, 8.02)
    assert check_reward_bound(-8.02, 8.02)
    assert not check_reward_bound(8.0200001, 8.02)


def test_advantage_bound_holds_for_normalized_values():
    buffer = _buffer([1.0, 2.0, 3.0])
    assert check_advantage_bound(buffer)
    assert check_normalization(buffer)


def test_tampered_advantages_are_flagged():
    buffer = _buffer([1.0, 2.0, 3.0])
    doubled = dataclasses.replace(buffer, normalized=2.0 * buffer.normalized)
    assert not check_advantage_bound(doubled)
    assert not check_normalization(doubled)
    shifted = dataclasses.replace(buffer, normalized=buffer.normalized + 0.1)
    assert not check_normalization(shifted)


def test_tiny_spread_only_needs_zero_mean():
    buffer = _buffer([1.0, 1.0 + 1e-9, 1.0 - 1e-9], delta=1e-8)
    assert check_normalization(buffer)


def test_zero_step_size_gives_zero_drift(rng):
    f = rng.normal(size=(32, 2))
    assert output_drift(f, f) == 0.0
    assert check_step_bound(f, f, 0.0, 10.0, 3.0)


def test_linear_policy_drift_stays_within_bound(rng):
    states = rng.normal(size=(32, 4))
    policy = GaussianPolicy(
        mean_net=MlpParams(weights=(rng.normal(size=(2, 4)),), biases=(rng.normal(size=2),)),
        log_std=np.zeros(2),
    )
    grad = GradientSet(weights=(rng.normal(size=(2, 4)),), biases=(rng.normal(size=2),), log_std=np.zeros(2))
    grad = grad.scaled(10.0 / grad.norm())
    alpha = 0.05
    before, _ = mlp_forward(policy.mean_net, states)
    after, _ = mlp_forward(update_policy(policy, grad, alpha).mean_net, states)
    # a linear map's output moves by at most |step| * sqrt(|s|^2 + 1)
    lipschitz = float(np.max(np.sqrt(np.sum(states * states, axis=1) + 1.0)))
    assert check_step_bound(before, after, alpha, 10.0, lipschitz)
    assert not check_step_bound(before, after, alpha, 10.0, 0.01 * lipschitz)


def test_constant_schedule_is_flagged():
    report = schedule_check(1e-3, 0.0, 100)
    assert not report.robbins_monro
    assert not report.strictly_decreasing
    assert report.violations


def test_harmonic_schedule_partial_sums():
    report = schedule_check(1e-2, 1e-2, 10_000)
    alphas = 1e-2 / (1.0 + 1e-2 * np.arange(10_000))
    assert report.robbins_monro and report.positive and report.strictly_decreasing
    assert report.violations == []
    assert report.sum_alpha == pytest.approx(alphas.sum())
    assert report.sum_alpha_sq == pytest.approx(np.sum(alphas**2))
    assert report.sum_alpha > schedule_check(1e-2, 1e-2, 1_000).sum_alpha
    assert report.sum_alpha_sq <= 1e-4 * (1.0 + 1.0 / 1e-2)


@pytest.mark.parametrize("alpha0, decay, horizon", [(0.0, 1e-3, 10), (1e-3, -1.0, 10), (1e-3, 1e-3, 0)])
def test_schedule_rejects_bad_arguments(alpha0, decay, horizon):
    with pytest.raises(ArgumentError):
        schedule_check(alpha0, decay, horizon)


def test_trend_of_flat_history_is_zero():
    assert stationarity_trend([2.5] * 20, 10) == 0.0


def test_trend_of_geometric_decay_is_log_ratio():
    history = [0.9**k for k in range(60)]
    assert stationarity_trend(history, 50) == pytest.approx(math.log(0.9), rel=1e-6)


def test_trend_window_must_fit():
    with pytest.raises(ArgumentError):
        stationarity_trend([1.0, 2.0], 3)
    with pytest.raises(ArgumentError):
        stationarity_trend([1.0, 2.0], 0)


def test_monitor_counts_violations():
    monitor = ConvergenceMonitor(make_env_spec("point_mass"), grad_max=10.0)
    assert monitor.observe_rewards([1.0, -9.0, 8.02]) == 1

    buffer = _buffer([1.0, 2.0, 3.0])
    monitor.observe_advantages(buffer)
    monitor.observe_advantages(dataclasses.replace(buffer, normalized=2.0 * buffer.normalized))

    before, after = np.zeros((4, 2)), np.ones((4, 2))
    assert not monitor.observe_step(before, after, parameter_step=1.0, alpha=0.01)
    assert monitor.lipschitz == pytest.approx(math.sqrt(2.0))
    assert monitor.observe_step(before, 0.5 * after, parameter_step=1.0, alpha=1.0)
    monitor.end_iteration(3.0, 0.01)
    monitor.end_iteration(3.0, 0.01)

    report = monitor.finalize(1e-2, 1e-3, horizon=2)
    assert report.reward_violations == 1
    assert report.advantage_violations == 1
    assert report.normalization_violations == 1
    assert report.step_violations == 1
    assert not report.passed
    assert report.grad_norms == [3.0, 3.0]
    assert report.max_drifts == [pytest.approx(math.sqrt(2.0)), 0.0]
    assert report.trend_window == 2 and report.trend_slope == 0.0
    assert report.schedule.robbins_monro


def test_clean_monitor_passes():
    monitor = ConvergenceMonitor(make_env_spec("pendulum"), grad_max=10.0)
    monitor.observe_rewards([-1.0, -2.0])
    monitor.observe_advantages(_buffer([0.5, -0.5, 2.0, 1.0]))
    monitor.end_iteration(1.0, 1e-3)
    assert monitor.finalize(1e-3, 1e-3, horizon=1).passed
    assert monitor.report.stationary is None


@pytest.mark.parametrize("ratio, stationary", [(0.99, True), (1.0, True), (1.02, False)])
def test_stationarity_verdict_needs_a_full_window(ratio, stationary):
    monitor = ConvergenceMonitor(make_env_spec("point_mass"), grad_max=10.0)
    for k in range(120):
        monitor.end_iteration(ratio**k, 1e-3)
    report = monitor.finalize(1e-3, 1e-3, horizon=120, window=100)
    assert report.trend_window == 100
    assert report.trend_slope == pytest.approx(math.log(ratio), abs=1e-9)
    assert report.stationary is stationary
    assert report.passed is stationary


def test_short_history_is_not_judged():
    monitor = ConvergenceMonitor(make_env_spec("point_mass"), grad_max=10.0)
    for k in range(10):
        monitor.end_iteration(1.5**k, 1e-3)
    report = monitor.finalize(1e-3, 1e-3, horizon=10)
    assert report.trend_slope > STATIONARITY_TOLERANCE
    assert report.stationary is None and report.passed
