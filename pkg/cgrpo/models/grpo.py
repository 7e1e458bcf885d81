"""Group-relative advantage estimation and the regularized clipped objective.

The pieces here are pure functions over one iteration's data; the training
loop that strings them together lives in ``agents.grpo_agent``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, Field

from ..errors import ArgumentError, InternalError, NumericError
from .clustering import NOISE, dbscan, kmeans, standardize
from .config import GrpoConfig, Variant
from .envs import Trajectory
from .numerics import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    GaussianPolicy,
    GradientSet,
    MlpParams,
    gaussian_entropy,
    gaussian_kl,
    gaussian_log_prob,
    mlp_backward,
    mlp_forward,
    policy_from_vector,
    policy_to_vector,
)


class TrajectoryFeatures(BaseModel):
    """Per-policy summary k-means groups on."""

    mean_return: float
    entropy: float
    action_variance: float = Field(ge=0.0)
    kl_to_ref: float = Field(ge=0.0)

    def as_vector(self) -> npt.NDArray[np.float64]:
        return np.array([self.mean_return, self.entropy, self.action_variance, self.kl_to_ref])


@dataclass(frozen=True)
class ReferencePolicy:
    """Policy the KL-to-reference feature is measured against."""

    policy: GaussianPolicy


@dataclass(frozen=True)
class GroupAssignment:
    """Partition of the population into k-means groups."""

    group_of_policy: Tuple[int, ...]
    group_members: Tuple[Tuple[int, ...], ...]
    centroids: npt.NDArray[np.float64]

    def __post_init__(self):
        seen = sorted(i for members in self.group_members for i in members)
        if seen != list(range(len(self.group_of_policy))):
            raise InternalError("group members do not partition the policies")
        for g, members in enumerate(self.group_members):
            if any(self.group_of_policy[i] != g for i in members):
                raise InternalError(f"group {g} membership disagrees with group_of_policy")

    @property
    def group_count(self) -> int:
        return len(self.group_members)


@dataclass(frozen=True)
class StateBaselines:
    """DBSCAN state clusters and the mean return-to-go of each."""

    labels: npt.NDArray[np.int64]
    baselines: Dict[int, float]
    global_mean: float
    cluster_count: int

    def baseline_for(self, label: int) -> float:
        if label == NOISE:
            return self.global_mean
        try:
            return self.baselines[label]
        except KeyError:
            raise InternalError(f"no baseline for state cluster {label}") from None

    @property
    def noise_fraction(self) -> float:
        return float(np.mean(self.labels == NOISE))


@dataclass(frozen=True)
class AdvantageBuffer:
    """One row per pooled transition, plus the per-group normalization statistics."""

    policy_index: npt.NDArray[np.int64]
    step: npt.NDArray[np.int64]
    returns: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]
    raw: npt.NDArray[np.float64]
    normalized: npt.NDArray[np.float64]
    group_index: npt.NDArray[np.int64]
    mu: npt.NDArray[np.float64]
    sigma: npt.NDArray[np.float64]
    sigma_global: float
    delta: float


@dataclass(frozen=True)
class Minibatch:
    """Transitions of one policy fed to a single gradient step."""

    states: npt.NDArray[np.float64]
    actions: npt.NDArray[np.float64]
    old_log_probs: npt.NDArray[np.float64]
    advantages: npt.NDArray[np.float64]
    next_states: npt.NDArray[np.float64]
    # pairs (s_t, s_{t+1}) inside the same trajectory
    has_next: npt.NDArray[np.bool_]

    def __len__(self) -> int:
        return len(self.advantages)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    surrogate: float
    smoothness: float
    diversity: float


# --- featurization and grouping ------------------------------------------


def compute_features(
    trajectories: Sequence[Trajectory], policy: GaussianPolicy, ref: ReferencePolicy
) -> TrajectoryFeatures:
    """Summarize one policy's trajectories for grouping."""
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    if not trajectories:
        raise ArgumentError("compute_features needs at least one trajectory")
    mean_return = float(np.mean([np.mean(t.rewards) for t in trajectories]))
    states = np.concatenate([t.states for t in trajectories])
    mean_p, _ = mlp_forward(policy.mean_net, states)
    mean_q, _ = mlp_forward(ref.policy.mean_net, states)
    kl = gaussian_kl(mean_p, policy.log_std, mean_q, ref.policy.log_std)
    return TrajectoryFeatures(
        mean_return=mean_return,
        entropy=gaussian_entropy(policy.log_std),
        action_variance=float(np.sum(np.exp(2.0 * policy.log_std))),
        kl_to_ref=float(np.mean(kl)),
    )


def assign_groups(features: Sequence[TrajectoryFeatures], k: int, seed: Union[int, Sequence[int]]) -> GroupAssignment:
    """k-means over standardized feature vectors, one label per policy."""
    n = len(features)
    if k < 1 or k > n:
        raise ArgumentError(f"cannot form {k} groups from {n} policies")
    z, _, _ = standardize(np.stack([f.as_vector() for f in features]))
    result = kmeans(z, k, seed)
    group_of_policy = tuple(int(g) for g in result.assignments)
    members = tuple(tuple(i for i in range(n) if group_of_policy[i] == g) for g in range(k))
    return GroupAssignment(group_of_policy=group_of_policy, group_members=members, centroids=result.centroids)


# --- advantages ------------------------------------------------------------


def return_to_go(rewards: npt.ArrayLike, gamma: float) -> npt.NDArray[np.float64]:
    """Discounted sum of future rewards at every step."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ArgumentError("return_to_go needs a non-empty reward sequence")
    out = np.empty_like(r)
    running = 0.0
    for t in range(r.size - 1, -1, -1):
        running = r[t] + gamma * running
        out[t] = running
    return out


def state_baselines(states: npt.ArrayLike, returns: npt.ArrayLike, eps: float, min_pts: int) -> StateBaselines:
    """DBSCAN over standardized states; each cluster's baseline is its mean return-to-go."""
    returns = np.asarray(returns, dtype=np.float64)
    z, _, _ = standardize(states)
    clusters = dbscan(z, eps, min_pts)
    baselines = {
        label: float(np.mean(returns[clusters.labels == label])) for label in range(clusters.cluster_count)
    }
    return StateBaselines(
        labels=clusters.labels,
        baselines=baselines,
        global_mean=float(np.mean(returns)),
        cluster_count=clusters.cluster_count,
    )


def raw_advantages(returns: npt.ArrayLike, baselines: StateBaselines) -> npt.NDArray[np.float64]:
    """Return-to-go minus the baseline of each transition's state cluster."""
    returns = np.asarray(returns, dtype=np.float64)
    if returns.shape != baselines.labels.shape:
        raise InternalError("returns and state labels have different lengths")
    lookup = np.array([baselines.baseline_for(int(label)) for label in baselines.labels])
    return returns - lookup


def group_normalize(
    advantages: npt.ArrayLike,
    policy_index: npt.ArrayLike,
    groups: GroupAssignment,
    delta: float,
    step: Optional[npt.ArrayLike] = None,
    returns: Optional[npt.ArrayLike] = None,
    labels: Optional[npt.ArrayLike] = None,
) -> AdvantageBuffer:
    """Z-score advantages within each policy group, pooling all member transitions."""
    a = np.asarray(advantages, dtype=np.float64)
    policy_index = np.asarray(policy_index, dtype=np.int64)
    group_of = np.asarray(groups.group_of_policy, dtype=np.int64)
    if np.any(policy_index < 0) or np.any(policy_index >= len(group_of)):
        raise InternalError("transition refers to a policy without a group")
    group_index = group_of[policy_index]
    k = groups.group_count
    mu, sigma = np.zeros(k), np.zeros(k)
    normalized = np.empty_like(a)
    for g in range(k):
        mask = group_index == g
        if not np.any(mask):
            raise InternalError(f"group {g} has no transitions")
        mu[g] = a[mask].mean()
        sigma[g] = a[mask].std()
        normalized[mask] = (a[mask] - mu[g]) / (sigma[g] + delta)
    n = len(a)
    return AdvantageBuffer(
        policy_index=policy_index,
        step=np.zeros(n, dtype=np.int64) if step is None else np.asarray(step, dtype=np.int64),
        returns=np.zeros(n) if returns is None else np.asarray(returns, dtype=np.float64),
        labels=np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64),
        raw=a,
        normalized=normalized,
        group_index=group_index,
        mu=mu,
        sigma=sigma,
        sigma_global=float(a.std()),
        delta=delta,
    )


def adaptive_clip(eps_base: float, sigma_g: float, sigma_global: float, delta: float = 1e-8) -> float:
    """Clip width for a group, widened in proportion to its relative spread."""
    if sigma_g < 0.0 or sigma_global < 0.0:
        raise ArgumentError("standard deviations must be non-negative")
    if sigma_global < delta:
        return eps_base
    return eps_base * max(1.0, sigma_g / sigma_global)


# --- objective terms ---------------------------------------------------------


def _check_ratio(ratio: npt.NDArray[np.float64]) -> None:
    if not np.all(np.isfinite(ratio)):
        raise NumericError("importance ratio is not finite")
    if np.any(ratio <= 0.0):
        raise NumericError("importance ratio must be positive")


def clipped_surrogate(ratio, advantage, eps: float):
    """Elementwise min(r A, clip(r, 1 - eps, 1 + eps) A)."""
    r = np.asarray(ratio, dtype=np.float64)
    _check_ratio(r)
    adv = np.asarray(advantage, dtype=np.float64)
    return np.minimum(r * adv, np.clip(r, 1.0 - eps, 1.0 + eps) * adv)


def clipped_surrogate_grad(ratio, advantage, eps: float):
    """d/dr of the clipped surrogate: the advantage where the unclipped term is the minimum, else 0."""
    r = np.asarray(ratio, dtype=np.float64)
    _check_ratio(r)
    adv = np.asarray(advantage, dtype=np.float64)
    unclipped = r * adv <= np.clip(r, 1.0 - eps, 1.0 + eps) * adv
    return np.where(unclipped, adv, 0.0)


def smoothness_penalty(mean_outputs: npt.ArrayLike, lambda_s: float) -> float:
    """lambda_s times the mean squared change of consecutive mean outputs."""
    f = np.asarray(mean_outputs, dtype=np.float64)
    if f.ndim == 1:
        f = f.reshape(-1, 1)
    if len(f) < 2 or lambda_s == 0.0:
        return 0.0
    steps = np.linalg.norm(np.diff(f, axis=0), axis=1)
    return float(lambda_s * steps.mean())


def diversity_penalty(centroids: npt.ArrayLike, tau: float, lambda_d: float) -> float:
    """Hinge on pairwise cosine similarity, summed over ordered pairs i != j."""
    c = np.asarray(centroids, dtype=np.float64)
    if c.ndim != 2 or len(c) < 2 or lambda_d == 0.0:
        return 0.0
    norms = np.linalg.norm(c, axis=1)
    total = 0.0
    for i in range(len(c)):
        for j in range(i + 1, len(c)):
            if norms[i] == 0.0 or norms[j] == 0.0:
                continue
            cos = float(c[i] @ c[j] / (norms[i] * norms[j]))
            total += 2.0 * max(0.0, cos - tau)
    return lambda_d * total


def total_loss(
    batch: Minibatch,
    policy: GaussianPolicy,
    config: GrpoConfig,
    eps_g: float,
    diversity_value: float = 0.0,
) -> Tuple[LossBreakdown, GradientSet]:
    """Loss to minimize: -surrogate + smoothness + diversity / N, with its gradient.

    The diversity share is a function of k-means centroids only, so it adds to
    the loss value without contributing a gradient.
    """
    full = config.variant is Variant.FULL
    eps = eps_g if full else config.eps_base
    net = policy.mean_net
    b = len(batch)

    mean, cache = mlp_forward(net, batch.states)
    log_prob = gaussian_log_prob(mean, policy.log_std, batch.actions)
    ratio = np.exp(log_prob - batch.old_log_probs)
    surrogate_loss = -float(np.mean(clipped_surrogate(ratio, batch.advantages, eps)))
    d_logp = -clipped_surrogate_grad(ratio, batch.advantages, eps) * ratio / b

    var = np.exp(2.0 * policy.log_std)
    diff = batch.actions - mean
    grad = mlp_backward(net, cache, d_logp[:, None] * diff / var)
    log_std_grad = np.sum(d_logp[:, None] * (diff * diff / var - 1.0), axis=0)
    grad = GradientSet(weights=grad.weights, biases=grad.biases, log_std=log_std_grad)

    smooth = 0.0
    pairs = int(np.sum(batch.has_next))
    if full and config.lambda_s > 0.0 and pairs > 0:
        both = np.concatenate([batch.states[batch.has_next], batch.next_states[batch.has_next]])
        out, pair_cache = mlp_forward(net, both)
        step = out[pairs:] - out[:pairs]
        norms = np.linalg.norm(step, axis=1)
        smooth = float(config.lambda_s * norms.mean())
        unit = np.divide(step, norms[:, None], out=np.zeros_like(step), where=norms[:, None] > 0.0)
        g_next = config.lambda_s / pairs * unit
        grad = grad + mlp_backward(net, pair_cache, np.concatenate([-g_next, g_next]))

    diversity = diversity_value / config.n_policies if full else 0.0
    total = surrogate_loss + smooth + diversity
    if not math.isfinite(total) or not grad.is_finite():
        raise NumericError(f"loss is not finite (surrogate={surrogate_loss}, smooth={smooth})")
    return LossBreakdown(total=total, surrogate=surrogate_loss, smoothness=smooth, diversity=diversity), grad


# --- parameter updates -----------------------------------------------------------


def clip_gradient(gradient: GradientSet, max_norm: float) -> Tuple[GradientSet, float]:
    """Rescale to at most max_norm; also returns the norm before clipping."""
    norm = gradient.norm()
    if norm > max_norm:
        return gradient.scaled(max_norm / norm), norm
    return gradient, norm


def update_policy(policy: GaussianPolicy, gradient: GradientSet, alpha: float, max_norm: float = 10.0) -> GaussianPolicy:
    """One plain gradient-descent step on the norm-clipped gradient; log_std re-clamped."""
    clipped, _ = clip_gradient(gradient, max_norm)
    net = policy.mean_net
    mean_net = MlpParams(
        weights=tuple(w - alpha * g for w, g in zip(net.weights, clipped.weights)),
        biases=tuple(b - alpha * g for b, g in zip(net.biases, clipped.biases)),
    )
    log_std = np.clip(policy.log_std - alpha * clipped.log_std, LOG_STD_MIN, LOG_STD_MAX)
    return GaussianPolicy(mean_net=mean_net, log_std=log_std)


def rank_policies(mean_returns: Sequence[float]) -> List[int]:
    """Indices by descending return; ties keep the lower index first."""
    return sorted(range(len(mean_returns)), key=lambda i: (-mean_returns[i], i))


def update_reference(policies: Sequence[GaussianPolicy], mean_returns: Sequence[float]) -> ReferencePolicy:
    """Parameter average of the better half of the population."""
    if not policies or len(policies) != len(mean_returns):
        raise ArgumentError("need one mean return per policy and at least one policy")
    top = rank_policies(mean_returns)[: math.ceil(len(policies) / 2)]
    average = np.mean([policy_to_vector(policies[i]) for i in top], axis=0)
    return ReferencePolicy(policy=policy_from_vector(policies[0].mean_net.layer_sizes, average))
