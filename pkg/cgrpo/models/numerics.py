"""Dense MLP math and diagonal-Gaussian policy distributions.

Everything here is a pure function of its inputs; randomness only enters
through an explicit ``numpy.random.Generator``. Weight matrices are stored
``(out_dim, in_dim)`` and inputs may carry any number of leading batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from ..errors import ArgumentError, NumericError, ShapeError

Matrix = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)
OUTPUT_GAIN = 0.01


@dataclass(frozen=True)
class MlpParams:
    """tanh hidden layers, identity output layer."""

    weights: Tuple[Matrix, ...]
    biases: Tuple[Vector, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 1:
            raise ShapeError("an MLP needs at least one layer and one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} does not match bias {b.shape}")
            if i > 0 and self.weights[i - 1].shape[0] != w.shape[1]:
                raise ShapeError(
                    f"layer {i}: expects input dim {w.shape[1]}, previous layer emits "
                    f"{self.weights[i - 1].shape[0]}"
                )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self) -> List[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]


@dataclass(frozen=True)
class MlpCache:
    # layer_inputs[i] is what layer i consumed; hidden_outputs[i] = tanh(pre-activation of layer i)
    layer_inputs: Tuple[npt.NDArray[np.float64], ...]
    hidden_outputs: Tuple[npt.NDArray[np.float64], ...]


@dataclass(frozen=True)
class GradientSet:
    weights: Tuple[Matrix, ...]
    biases: Tuple[Vector, ...]
    log_std: Vector

    def norm(self) -> float:
        total = sum(float(np.sum(w * w)) for w in self.weights)
        total += sum(float(np.sum(b * b)) for b in self.biases)
        total += float(np.sum(self.log_std * self.log_std))
        return math.sqrt(total)

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(
            weights=tuple(w * factor for w in self.weights),
            biases=tuple(b * factor for b in self.biases),
            log_std=self.log_std * factor,
        )

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(
            weights=tuple(a + b for a, b in zip(self.weights, other.weights)),
            biases=tuple(a + b for a, b in zip(self.biases, other.biases)),
            log_std=self.log_std + other.log_std,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (*self.weights, *self.biases, self.log_std))


@dataclass(frozen=True)
class GaussianPolicy:
    """Diagonal Gaussian actor with a state-independent log-std vector."""

    mean_net: MlpParams
    log_std: Vector

    def __post_init__(self):
        if self.log_std.shape != (self.mean_net.output_dim,):
            raise ShapeError(
                f"log_std has shape {self.log_std.shape}, mean net emits {self.mean_net.output_dim}"
            )

    @property
    def state_dim(self) -> int:
        return self.mean_net.input_dim

    @property
    def action_dim(self) -> int:
        return self.mean_net.output_dim

    @property
    def std(self) -> Vector:
        return np.exp(self.log_std)

    def mean(self, states: npt.ArrayLike) -> npt.NDArray[np.float64]:
        return mlp_forward(self.mean_net, states)[0]


def _orthogonal(shape: Tuple[int, int], gain: float, rng: np.random.Generator) -> Matrix:
    a = rng.normal(0.0, 1.0, size=shape)
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    q = u if u.shape == shape else vt
    return gain * q[: shape[0], : shape[1]]


def init_mlp(layer_sizes: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """Orthogonal weights (gain sqrt 2 on hidden layers, 0.01 on the output layer), zero biases."""
    if len(layer_sizes) < 3:
        raise ArgumentError("layer_sizes needs input, at least one hidden and an output size")
    weights, biases = [], []
    n_layers = len(layer_sizes) - 1
    for i in range(n_layers):
        gain = OUTPUT_GAIN if i == n_layers - 1 else math.sqrt(2.0)
        weights.append(_orthogonal((layer_sizes[i + 1], layer_sizes[i]), gain, rng))
        biases.append(np.zeros(layer_sizes[i + 1]))
    return MlpParams(weights=tuple(weights), biases=tuple(biases))


def init_policy(
    state_dim: int,
    action_dim: int,
    hidden_sizes: Sequence[int],
    rng: np.random.Generator,
    log_std_init: float = -0.5,
) -> GaussianPolicy:
    mean_net = init_mlp([state_dim, *hidden_sizes, action_dim], rng)
    log_std = np.clip(np.full(action_dim, float(log_std_init)), LOG_STD_MIN, LOG_STD_MAX)
    return GaussianPolicy(mean_net=mean_net, log_std=log_std)


def mlp_forward(params: MlpParams, inputs: npt.ArrayLike) -> Tuple[npt.NDArray[np.float64], MlpCache]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != params.input_dim:
        raise ShapeError(f"input has shape {x.shape}, network expects last dim {params.input_dim}")
    layer_inputs, hidden_outputs = [], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        layer_inputs.append(h)
        z = h @ w.T + b
        if i < last:
            h = np.tanh(z)
            hidden_outputs.append(h)
        else:
            h = z
    return h, MlpCache(layer_inputs=tuple(layer_inputs), hidden_outputs=tuple(hidden_outputs))


def mlp_backward(params: MlpParams, cache: MlpCache, output_grad: npt.ArrayLike) -> GradientSet:
    """Gradient of sum(output * output_grad) with respect to every parameter.

    Leading batch axes are summed over.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    expected = cache.layer_inputs[-1].shape[:-1] + (params.output_dim,)
    if g.shape != expected or len(cache.layer_inputs) != len(params.weights):
        raise ShapeError(f"output_grad has shape {g.shape}, forward pass produced {expected}")

    n_layers = len(params.weights)
    grad_w: List[Matrix] = [None] * n_layers  # type: ignore[list-item]
    grad_b: List[Vector] = [None] * n_layers  # type: ignore[list-item]
    delta = g
    for i in range(n_layers - 1, -1, -1):
        a_in = cache.layer_inputs[i]
        d2 = delta.reshape(-1, delta.shape[-1])
        a2 = a_in.reshape(-1, a_in.shape[-1])
        grad_w[i] = d2.T @ a2
        grad_b[i] = d2.sum(axis=0)
        if i > 0:
            upstream = delta @ params.weights[i]
            h = cache.hidden_outputs[i - 1]
            delta = upstream * (1.0 - h * h)
    return GradientSet(weights=tuple(grad_w), biases=tuple(grad_b), log_std=np.zeros(params.output_dim))


def _require_finite(name: str, *arrays: npt.ArrayLike) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"{name}: non-finite input")


def gaussian_log_prob(mean: npt.ArrayLike, log_std: npt.ArrayLike, action: npt.ArrayLike):
    """Summed over the last axis; broadcasts over leading axes."""
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1:] != log_std.shape[-1:] or mean.shape[-1:] != log_std.shape[-1:]:
        raise ShapeError(f"action {action.shape} / mean {mean.shape} / log_std {log_std.shape} disagree")
    _require_finite("gaussian_log_prob", mean, log_std, action)
    z = (action - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std: npt.ArrayLike) -> float:
    log_std = np.asarray(log_std, dtype=np.float64)
    return float(np.sum(0.5 * (LOG_2PI + 1.0) + log_std))


def gaussian_kl(mean_p, log_std_p, mean_q, log_std_q):
    """KL(p || q) for diagonal Gaussians, summed over the last axis."""
    mean_p, mean_q = np.asarray(mean_p, dtype=np.float64), np.asarray(mean_q, dtype=np.float64)
    log_std_p = np.asarray(log_std_p, dtype=np.float64)
    log_std_q = np.asarray(log_std_q, dtype=np.float64)
    if mean_p.shape[-1:] != mean_q.shape[-1:] or log_std_p.shape[-1:] != log_std_q.shape[-1:]:
        raise ShapeError("KL operands have different action dimensions")
    var_p = np.exp(2.0 * log_std_p)
    var_q = np.exp(2.0 * log_std_q)
    if np.any(var_q == 0.0):
        raise NumericError("gaussian_kl: reference standard deviation is zero")
    diff = mean_p - mean_q
    kl = np.sum(log_std_q - log_std_p + (var_p + diff * diff) / (2.0 * var_q) - 0.5, axis=-1)
    # clamp float round-off; the closed form is non-negative
    return np.maximum(kl, 0.0)


def gaussian_sample(mean: npt.ArrayLike, log_std: npt.ArrayLike, rng: np.random.Generator):
    mean = np.asarray(mean, dtype=np.float64)
    z = rng.standard_normal(size=mean.shape)
    return mean + np.exp(np.asarray(log_std, dtype=np.float64)) * z


# --- flat parameter codec -------------------------------------------------


def policy_to_vector(policy: GaussianPolicy) -> Vector:
    parts = []
    for w, b in zip(policy.mean_net.weights, policy.mean_net.biases):
        parts.append(w.ravel())
        parts.append(b)
    parts.append(policy.log_std)
    return np.concatenate(parts)


def gradient_to_vector(grad: GradientSet) -> Vector:
    parts = []
    for w, b in zip(grad.weights, grad.biases):
        parts.append(w.ravel())
        parts.append(b)
    parts.append(grad.log_std)
    return np.concatenate(parts)


def parameter_count(layer_sizes: Sequence[int]) -> int:
    count = sum(layer_sizes[i + 1] * (layer_sizes[i] + 1) for i in range(len(layer_sizes) - 1))
    return count + layer_sizes[-1]


def policy_from_vector(layer_sizes: Sequence[int], vector: npt.ArrayLike) -> GaussianPolicy:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.size != parameter_count(layer_sizes):
        raise ShapeError(
            f"parameter vector of length {vector.size} does not fit layers {list(layer_sizes)}"
        )
    weights, biases = [], []
    pos = 0
    for i in range(len(layer_sizes) - 1):
        n_out, n_in = layer_sizes[i + 1], layer_sizes[i]
        weights.append(vector[pos : pos + n_out * n_in].reshape(n_out, n_in).copy())
        pos += n_out * n_in
        biases.append(vector[pos : pos + n_out].copy())
        pos += n_out
    log_std = vector[pos:].copy()
    return GaussianPolicy(mean_net=MlpParams(weights=tuple(weights), biases=tuple(biases)), log_std=log_std)


def finite_difference_check(
    fn: Callable[[GaussianPolicy], float],
    policy: GaussianPolicy,
    analytic: GradientSet,
    h: float = 1e-5,
    floor: float = 1e-5,
) -> float:
    """Max elementwise relative error between `analytic` and central differences of `fn`.

    The denominator is max(|analytic| + |numeric|, floor) so entries that are
    zero in both do not divide by zero.
    """
    sizes = policy.mean_net.layer_sizes
    theta = policy_to_vector(policy)
    grad = gradient_to_vector(analytic)
    if grad.shape != theta.shape:
        raise ShapeError("analytic gradient does not match the policy parameters")
    numeric = np.empty_like(theta)
    for j in range(theta.size):
        original = theta[j]
        theta[j] = original + h
        f_plus = fn(policy_from_vector(sizes, theta))
        theta[j] = original - h
        f_minus = fn(policy_from_vector(sizes, theta))
        theta[j] = original
        numeric[j] = (f_plus - f_minus) / (2.0 * h)
    denom = np.maximum(np.abs(grad) + np.abs(numeric), floor)
    return float(np.max(np.abs(grad - numeric) / denom))
