"""Deterministic desk-scale control tasks and trajectory collection.

Two tasks are built in: ``point_mass`` (a double integrator chasing a fixed
goal inside a walled [-1, 1]^2 arena) and ``pendulum`` (classic torque-limited
swing-up). All dynamics are vectorized over leading batch axes so one policy
can step many episodes at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..errors import ArgumentError, NumericError, ShapeError
from .numerics import GaussianPolicy, gaussian_log_prob, gaussian_sample, mlp_forward


class EnvSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    state_dim: int = Field(ge=1)
    observation_dim: int = Field(ge=1)
    action_dim: int = Field(ge=1)
    action_low: Tuple[float, ...]
    action_high: Tuple[float, ...]
    dt: float = Field(gt=0)
    horizon: int = Field(ge=1)
    reward_bound: float = Field(gt=0)
    physics: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_bounds(self) -> "EnvSpec":
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValueError("action bounds must have action_dim entries")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError("action_low must be strictly below action_high")
        return self

    def with_horizon(self, horizon: int) -> "EnvSpec":
        return self.model_copy(update={"horizon": horizon}) if horizon else self


POINT_MASS_GOAL = (0.5, 0.5)

ENV_SPECS: Dict[str, EnvSpec] = {
    "point_mass": EnvSpec(
        name="point_mass",
        state_dim=4,
        observation_dim=4,
        action_dim=2,
        action_low=(-1.0, -1.0),
        action_high=(1.0, 1.0),
        dt=0.05,
        horizon=100,
        # farthest arena corner from the goal is 4.5 away in squared distance; 8.02 is the stated envelope
        reward_bound=(2.0 * math.sqrt(2.0)) ** 2 + 0.01 * 2.0,
        physics={
            "goal_x": POINT_MASS_GOAL[0],
            "goal_y": POINT_MASS_GOAL[1],
            "arena": 1.0,
            "action_cost": 0.01,
            "mass": 1.0,
        },
    ),
    "pendulum": EnvSpec(
        name="pendulum",
        state_dim=2,
        observation_dim=3,
        action_dim=1,
        action_low=(-2.0,),
        action_high=(2.0,),
        dt=0.05,
        horizon=200,
        reward_bound=math.pi**2 + 0.1 * 64.0 + 0.001 * 4.0,
        physics={"g": 10.0, "m": 1.0, "l": 1.0, "max_speed": 8.0},
    ),
}


def make_env_spec(name: str, horizon: int = 0) -> EnvSpec:
    try:
        spec = ENV_SPECS[name]
    except KeyError:
        raise ArgumentError(f"unknown environment '{name}', expected one of {sorted(ENV_SPECS)}")
    return spec.with_horizon(horizon)


# physics entries scaled by perturb_env_spec
PERTURBED_PHYSICS: Dict[str, Tuple[str, ...]] = {"point_mass": ("mass",), "pendulum": ("m", "l")}


def perturb_env_spec(spec: EnvSpec, scale: float) -> EnvSpec:
    """Same task with its inertia scaled; for checking how a trained policy generalizes."""
    if not scale > 0.0 or not math.isfinite(scale):
        raise ArgumentError(f"perturbation scale must be a positive number, got {scale}")
    physics = dict(spec.physics)
    for key in PERTURBED_PHYSICS[spec.name]:
        physics[key] *= scale
    return spec.model_copy(update={"physics": physics})


@dataclass(frozen=True)
class EnvState:
    """Internal state (point_mass: x, y, vx, vy; pendulum: theta, theta_dot), batched on leading axes."""

    state: npt.NDArray[np.float64]
    step: int = 0


@dataclass(frozen=True)
class Transition:
    state: npt.NDArray[np.float64]
    action: npt.NDArray[np.float64]
    reward: float
    log_prob: float
    mean_output: npt.NDArray[np.float64]
    next_state: npt.NDArray[np.float64]


@dataclass(frozen=True)
class Trajectory:
    """One episode stored column-wise; ``actions`` are the pre-clamp samples."""

    policy_index: int
    states: npt.NDArray[np.float64]
    actions: npt.NDArray[np.float64]
    rewards: npt.NDArray[np.float64]
    log_probs: npt.NDArray[np.float64]
    mean_outputs: npt.NDArray[np.float64]
    next_states: npt.NDArray[np.float64]

    def __post_init__(self):
        if len(self.rewards) == 0:
            raise ArgumentError("a trajectory needs at least one transition")

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, t: int) -> Transition:
        return Transition(
            state=self.states[t],
            action=self.actions[t],
            reward=float(self.rewards[t]),
            log_prob=float(self.log_probs[t]),
            mean_output=self.mean_outputs[t],
            next_state=self.next_states[t],
        )

    @property
    def transitions(self) -> List[Transition]:
        return [self[t] for t in range(len(self))]

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))


def wrap_angle(theta):
    return (theta + np.pi) % (2.0 * np.pi) - np.pi


def observe(spec: EnvSpec, env_state: EnvState) -> npt.NDArray[np.float64]:
    s = env_state.state
    if spec.name == "pendulum":
        theta, theta_dot = s[..., 0], s[..., 1]
        return np.stack([np.cos(theta), np.sin(theta), theta_dot], axis=-1)
    return s.copy()


def env_reset(spec: EnvSpec, rng: np.random.Generator, n: Optional[int] = None) -> EnvState:
    """Fresh episode start; ``n`` draws a batch of independent starts."""
    batch = () if n is None else (n,)
    if spec.name == "point_mass":
        position = rng.uniform(-1.0, 1.0, size=batch + (2,))
        state = np.concatenate([position, np.zeros(batch + (2,))], axis=-1)
    elif spec.name == "pendulum":
        theta = rng.uniform(-np.pi, np.pi, size=batch)
        theta_dot = rng.uniform(-1.0, 1.0, size=batch)
        state = np.stack([theta, theta_dot], axis=-1)
    else:
        raise ArgumentError(f"unknown environment '{spec.name}'")
    return EnvState(state=state, step=0)


def clamp_action(spec: EnvSpec, action: npt.ArrayLike) -> npt.NDArray[np.float64]:
    return np.clip(np.asarray(action, dtype=np.float64), spec.action_low, spec.action_high)


def _point_mass_step(spec: EnvSpec, s, a):
    p = spec.physics
    pos, vel = s[..., :2], s[..., 2:]
    vel = vel + spec.dt * a / p["mass"]
    pos = pos + spec.dt * vel
    arena = p["arena"]
    hit = np.abs(pos) > arena
    pos = np.clip(pos, -arena, arena)
    vel = np.where(hit, 0.0, vel)
    goal = np.array([p["goal_x"], p["goal_y"]])
    offset = pos - goal
    reward = -np.sum(offset * offset, axis=-1) - p["action_cost"] * np.sum(a * a, axis=-1)
    return np.concatenate([pos, vel], axis=-1), reward


def _pendulum_step(spec: EnvSpec, s, a):
    p = spec.physics
    theta, theta_dot = s[..., 0], s[..., 1]
    u = a[..., 0]
    cost = wrap_angle(theta) ** 2 + 0.1 * theta_dot**2 + 0.001 * u**2
    accel = 3.0 * p["g"] / (2.0 * p["l"]) * np.sin(theta) + 3.0 * u / (p["m"] * p["l"] ** 2)
    new_theta_dot = np.clip(theta_dot + spec.dt * accel, -p["max_speed"], p["max_speed"])
    new_theta = theta + spec.dt * new_theta_dot
    return np.stack([new_theta, new_theta_dot], axis=-1), -cost


def env_step(spec: EnvSpec, env_state: EnvState, action: npt.ArrayLike):
    """Clamp the action, integrate one ``dt``, return (next state, reward, done)."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape[-1:] != (spec.action_dim,):
        raise ShapeError(f"action has shape {a.shape}, {spec.name} expects last dim {spec.action_dim}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{spec.name}: non-finite action")
    if env_state.step >= spec.horizon:
        raise ArgumentError(f"{spec.name}: episode already reached its horizon of {spec.horizon}")
    a = clamp_action(spec, a)
    if spec.name == "point_mass":
        new_state, reward = _point_mass_step(spec, env_state.state, a)
    else:
        new_state, reward = _pendulum_step(spec, env_state.state, a)
    step = env_state.step + 1
    return EnvState(state=new_state, step=step), reward, step >= spec.horizon


def rollout_batch(
    policy: GaussianPolicy,
    spec: EnvSpec,
    rng: np.random.Generator,
    n_episodes: int,
    policy_index: int = 0,
    deterministic: bool = False,
) -> List[Trajectory]:
    """Run ``n_episodes`` full-horizon episodes of one policy side by side.

    Random draws happen in a fixed order (all resets, then per step one noise
    block for every episode), so the output is a pure function of the rng state.
    """
    if policy.action_dim != spec.action_dim or policy.state_dim != spec.observation_dim:
        raise ShapeError(
            f"policy maps {policy.state_dim}->{policy.action_dim}, "
            f"{spec.name} needs {spec.observation_dim}->{spec.action_dim}"
        )
    if n_episodes < 1:
        raise ArgumentError("n_episodes must be at least 1")

    T, n = spec.horizon, n_episodes
    states = np.empty((T, n, spec.observation_dim))
    actions = np.empty((T, n, spec.action_dim))
    means = np.empty((T, n, spec.action_dim))
    rewards = np.empty((T, n))
    log_probs = np.empty((T, n))
    next_states = np.empty((T, n, spec.observation_dim))

    env_state = env_reset(spec, rng, n)
    obs = observe(spec, env_state)
    for t in range(T):
        mean, _ = mlp_forward(policy.mean_net, obs)
        action = mean.copy() if deterministic else gaussian_sample(mean, policy.log_std, rng)
        states[t], means[t], actions[t] = obs, mean, action
        log_probs[t] = gaussian_log_prob(mean, policy.log_std, action)
        env_state, reward, _ = env_step(spec, env_state, action)
        obs = observe(spec, env_state)
        rewards[t], next_states[t] = reward, obs
        if not np.all(np.isfinite(obs)):
            raise NumericError(f"{spec.name}: state became non-finite at step {t}")

    return [
        Trajectory(
            policy_index=policy_index,
            states=states[:, i].copy(),
            actions=actions[:, i].copy(),
            rewards=rewards[:, i].copy(),
            log_probs=log_probs[:, i].copy(),
            mean_outputs=means[:, i].copy(),
            next_states=next_states[:, i].copy(),
        )
        for i in range(n)
    ]


def rollout(policy: GaussianPolicy, spec: EnvSpec, seed: int, policy_index: int = 0) -> Trajectory:
    return rollout_batch(policy, spec, np.random.default_rng(seed), 1, policy_index=policy_index)[0]
