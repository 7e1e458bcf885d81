from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..errors import DivergenceError, InternalError, NumericError
from ..models.config import GrpoConfig, Variant
from ..models.envs import EnvSpec, Trajectory, env_reset, observe, rollout_batch
from ..models.grpo import (
    AdvantageBuffer,
    GroupAssignment,
    Minibatch,
    ReferencePolicy,
    adaptive_clip,
    assign_groups,
    clip_gradient,
    compute_features,
    diversity_penalty,
    group_normalize,
    raw_advantages,
    return_to_go,
    state_baselines,
    total_loss,
    update_policy,
    update_reference,
)
from ..models.metrics import ConvergenceReport, IterationMetrics, PolicyIterationStats
from ..models.numerics import GaussianPolicy, init_policy, mlp_forward
from ..services.diagnostics_service import PROBE_STATES, ConvergenceMonitor

logger = logging.getLogger(__name__)


class Stream(IntEnum):
    INIT = 0
    ROLLOUT = 1
    SHUFFLE = 2
    GROUPING = 3
    PROBE = 4
    EVAL = 5


def stream(seed: int, purpose: Stream, *key: int) -> np.random.Generator:
    """Independent generator per (seed, purpose, key...); no draw order is shared between streams."""
    return np.random.default_rng([seed, int(purpose), *key])


@dataclass
class AgentState:
    """Everything training needs to continue from an iteration boundary."""

    iteration: int
    policies: List[GaussianPolicy]
    reference: ReferencePolicy
    report: ConvergenceReport


@dataclass(frozen=True)
class PooledBatch:
    """Transitions of every policy in one iteration, flattened and aligned."""

    policy_index: np.ndarray
    step: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    returns: np.ndarray


def pool_trajectories(batches: Sequence[Sequence[Trajectory]], gamma: float) -> PooledBatch:
    """Flatten per-policy trajectories and attach discounted returns."""
    trajectories = [t for batch in batches for t in batch]
    return PooledBatch(
        policy_index=np.concatenate([np.full(len(t), t.policy_index, dtype=np.int64) for t in trajectories]),
        step=np.concatenate([np.arange(len(t), dtype=np.int64) for t in trajectories]),
        states=np.concatenate([t.states for t in trajectories]),
        actions=np.concatenate([t.actions for t in trajectories]),
        log_probs=np.concatenate([t.log_probs for t in trajectories]),
        next_states=np.concatenate([t.next_states for t in trajectories]),
        rewards=np.concatenate([t.rewards for t in trajectories]),
        returns=np.concatenate([return_to_go(t.rewards, gamma) for t in trajectories]),
    )


class GrpoAgent:
    """Trains a population of Gaussian policies with group-relative advantages."""

    def __init__(self, config: GrpoConfig, spec: EnvSpec, workers: int = 1, record_wall_time: bool = True):
        self.config = config
        self.spec = spec
        self.workers = max(1, workers)
        self.record_wall_time = record_wall_time
        self.episodes_per_policy = max(1, config.batch_timesteps // spec.horizon)
        self.policies: List[GaussianPolicy] = [
            init_policy(
                spec.observation_dim,
                spec.action_dim,
                config.hidden_sizes,
                stream(config.seed, Stream.INIT, i),
                config.log_std_init,
            )
            for i in range(config.n_policies)
        ]
        self.reference = update_reference(self.policies, [0.0] * config.n_policies)
        self.probe_states = observe(spec, env_reset(spec, stream(config.seed, Stream.PROBE), PROBE_STATES))
        self.monitor = ConvergenceMonitor(spec, config.grad_clip)
        if config.variant is Variant.FULL and config.lambda_d > 0.0:
            logger.debug("diversity penalty depends on k-means centroids only; it adds to the loss without a gradient")
        self.iteration = 0

    # --- state -------------------------------------------------------------

    def snapshot(self) -> AgentState:
        """Copy of the current state for checkpointing."""
        return AgentState(
            iteration=self.iteration,
            policies=list(self.policies),
            reference=self.reference,
            report=self.monitor.report.model_copy(deep=True),
        )

    def restore(self, state: AgentState) -> None:
        """Replace the population, reference and monitor with a saved state."""
        if len(state.policies) != self.config.n_policies:
            raise InternalError(f"state holds {len(state.policies)} policies, config expects {self.config.n_policies}")
        self.iteration = state.iteration
        self.policies = list(state.policies)
        self.reference = state.reference
        self.monitor.report = state.report.model_copy(deep=True)

    # --- phases ------------------------------------------------------------

    def collect(self, k: int) -> List[List[Trajectory]]:
        """Roll out every policy for one iteration, optionally on worker threads."""

        def run(i: int) -> List[Trajectory]:
            rng = stream(self.config.seed, Stream.ROLLOUT, i, k)
            return rollout_batch(self.policies[i], self.spec, rng, self.episodes_per_policy, policy_index=i)

        indices = range(self.config.n_policies)
        if self.workers == 1:
            return [run(i) for i in indices]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(run, indices))

    def _clip_widths(self, buffer: AdvantageBuffer) -> List[float]:
        if self.config.variant is Variant.SIMPLE:
            return [self.config.eps_base] * len(buffer.sigma)
        return [
            adaptive_clip(self.config.eps_base, float(s), buffer.sigma_global, self.config.delta)
            for s in buffer.sigma
        ]

    def _update(self, i: int, k: int, pooled: PooledBatch, buffer: AdvantageBuffer, eps: float,
                diversity: float, alpha: float) -> Dict[str, float]:
        cfg = self.config
        mask = pooled.policy_index == i
        states, actions = pooled.states[mask], pooled.actions[mask]
        old_log_probs, advantages = pooled.log_probs[mask], buffer.normalized[mask]
        next_states = pooled.next_states[mask]
        has_next = pooled.step[mask] < self.spec.horizon - 1

        rng = stream(cfg.seed, Stream.SHUFFLE, i, k)
        policy = self.policies[i]
        totals = {"surrogate": 0.0, "smoothness": 0.0, "diversity": 0.0, "grad_norm": 0.0}
        updates = 0
        n = len(advantages)
        for epoch in range(cfg.epochs_per_iter):
            order = rng.permutation(n)
            for start in range(0, n, cfg.minibatch_size):
                idx = order[start : start + cfg.minibatch_size]
                batch = Minibatch(
                    states=states[idx],
                    actions=actions[idx],
                    old_log_probs=old_log_probs[idx],
                    advantages=advantages[idx],
                    next_states=next_states[idx],
                    has_next=has_next[idx],
                )
                try:
                    loss, grad = total_loss(batch, policy, cfg, eps, diversity)
                except NumericError as exc:
                    raise DivergenceError(
                        f"policy {i} diverged at iteration {k}: {exc.detail}",
                        {"iteration": k, "policy": i, "epoch": epoch, "alpha": alpha, "eps_g": eps,
                         "log_std": policy.log_std.tolist()},
                    ) from exc
                _, norm = clip_gradient(grad, cfg.grad_clip)
                before, _ = mlp_forward(policy.mean_net, self.probe_states)
                updated = update_policy(policy, grad, alpha, cfg.grad_clip)
                after, _ = mlp_forward(updated.mean_net, self.probe_states)
                step = math.sqrt(
                    sum(float(np.sum((a - b) ** 2)) for a, b in zip(updated.mean_net.weights, policy.mean_net.weights))
                    + sum(float(np.sum((a - b) ** 2)) for a, b in zip(updated.mean_net.biases, policy.mean_net.biases))
                )
                self.monitor.observe_step(before, after, step, alpha)
                policy = updated
                totals["surrogate"] += loss.surrogate
                totals["smoothness"] += loss.smoothness
                totals["diversity"] += loss.diversity
                totals["grad_norm"] += norm
                updates += 1
                logger.debug("policy %d epoch %d loss %.6f grad %.4f", i, epoch, loss.total, norm)
        self.policies[i] = policy
        return {key: value / updates for key, value in totals.items()}

    # --- one iteration -----------------------------------------------------

    def train_iteration(self, k: Optional[int] = None) -> IterationMetrics:
        """Collect, group, normalize and update once; returns the iteration's metrics."""
        cfg = self.config
        k = self.iteration if k is None else k
        started = time.perf_counter()
        alpha = cfg.learning_rate(k)
        full = cfg.variant is Variant.FULL

        try:
            batches = self.collect(k)
        except NumericError as exc:
            raise DivergenceError(f"rollout failed at iteration {k}: {exc.detail}", {"iteration": k}) from exc

        features = [compute_features(batches[i], self.policies[i], self.reference) for i in range(cfg.n_policies)]
        groups: GroupAssignment = assign_groups(features, cfg.n_groups, [cfg.seed, int(Stream.GROUPING), k])

        pooled = pool_trajectories(batches, cfg.gamma)
        self.monitor.observe_rewards(pooled.rewards)
        baselines = state_baselines(pooled.states, pooled.returns, cfg.dbscan_eps, cfg.dbscan_min_pts)
        advantages = raw_advantages(pooled.returns, baselines)
        buffer = group_normalize(
            advantages, pooled.policy_index, groups, cfg.delta,
            step=pooled.step, returns=pooled.returns, labels=baselines.labels,
        )
        self.monitor.observe_advantages(buffer)
        eps_g = self._clip_widths(buffer)
        diversity = diversity_penalty(groups.centroids, cfg.tau, cfg.lambda_d) if full else 0.0

        episode_returns = [np.array([t.episode_return for t in batch]) for batch in batches]
        mean_returns = [float(r.mean()) for r in episode_returns]

        stats = []
        for i in range(cfg.n_policies):
            g = groups.group_of_policy[i]
            update = self._update(i, k, pooled, buffer, eps_g[g], diversity, alpha)
            stats.append(
                PolicyIterationStats(
                    policy_index=i,
                    mean_return=mean_returns[i],
                    std_return=float(episode_returns[i].std()),
                    surrogate_loss=update["surrogate"],
                    smooth_loss=update["smoothness"],
                    diversity_loss=update["diversity"],
                    group_index=g,
                    mu_g=float(buffer.mu[g]),
                    sigma_g=float(buffer.sigma[g]),
                    eps_g=eps_g[g],
                    grad_norm=update["grad_norm"],
                )
            )

        if full:
            self.reference = update_reference(self.policies, mean_returns)

        grad_norm = float(np.mean([s.grad_norm for s in stats]))
        self.monitor.end_iteration(grad_norm, alpha)
        wall_ms = (time.perf_counter() - started) * 1e3 if self.record_wall_time else 0.0
        values = [v for s in stats for v in (s.mean_return, s.surrogate_loss, s.smooth_loss, s.grad_norm)]
        if not all(math.isfinite(v) for v in values):
            raise DivergenceError(f"non-finite metrics at iteration {k}", {"iteration": k, "stats": [s.model_dump() for s in stats]})

        metrics = IterationMetrics(
            iteration=k,
            policies=stats,
            state_clusters=baselines.cluster_count,
            noise_frac=baselines.noise_fraction,
            alpha_k=alpha,
            wall_ms=wall_ms,
            diversity_penalty=diversity,
            group_count=groups.group_count,
        )
        self.iteration = k + 1
        logger.info(
            "iteration %d: returns %s, clusters %d, noise %.2f, alpha %.3g",
            k, ", ".join(f"{r:.2f}" for r in mean_returns), baselines.cluster_count, baselines.noise_fraction, alpha,
        )
        return metrics
