import math

import numpy as np
import pytest

from cgrpo.errors import ArgumentError, NumericError, ShapeError
from cgrpo.models.numerics import (
    LOG_STD_MAX,
    GaussianPolicy,
    MlpParams,
    finite_difference_check,
    gaussian_entropy,
    gaussian_kl,
    gaussian_log_prob,
    gaussian_sample,
    init_mlp,
    init_policy,
    mlp_backward,
    mlp_forward,
    parameter_count,
    policy_from_vector,
    policy_to_vector,
)


def _random_net(sizes, rng, scale=0.5):
    return MlpParams(
        weights=tuple(rng.normal(0, scale, (sizes[i + 1], sizes[i])) for i in range(len(sizes) - 1)),
        biases=tuple(rng.normal(0, scale, sizes[i + 1]) for i in range(len(sizes) - 1)),
    )


def test_forward_matches_layer_by_layer_evaluation(rng):
    net = _random_net([3, 4, 2], rng)
    x = rng.normal(size=3)
    out, _ = mlp_forward(net, x)

    hidden = [math.tanh(sum(net.weights[0][j, i] * x[i] for i in range(3)) + net.biases[0][j]) for j in range(4)]
    expected = [sum(net.weights[1][k, j] * hidden[j] for j in range(4)) + net.biases[1][k] for k in range(2)]
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_forward_accepts_leading_batch_axes(rng):
    net = _random_net([3, 5, 2], rng)
    x = rng.normal(size=(4, 6, 3))
    out, _ = mlp_forward(net, x)
    assert out.shape == (4, 6, 2)
    np.testing.assert_allclose(out[2, 3], mlp_forward(net, x[2, 3])[0])


def test_forward_rejects_wrong_input_dim(rng):
    net = _random_net([3, 5, 2], rng)
    with pytest.raises(ShapeError):
        mlp_forward(net, np.zeros((2, 4)))


def test_params_reject_mismatched_layers():
    with pytest.raises(ShapeError):
        MlpParams(weights=(np.zeros((4, 3)), np.zeros((2, 5))), biases=(np.zeros(4), np.zeros(2)))


@pytest.mark.parametrize("sizes", [[4, 64, 64, 2], [3, 64, 64, 1], [3, 7, 2]])
def test_backward_matches_central_differences(sizes, rng):
    policy = init_policy(sizes[0], sizes[-1], sizes[1:-1], rng)
    # move away from the tiny output gain so every layer carries a visible gradient
    policy = GaussianPolicy(mean_net=_random_net(sizes, rng, scale=0.3), log_std=policy.log_std)
    x = rng.normal(size=(5, sizes[0]))
    g = rng.normal(size=(5, sizes[-1]))

    def fn(p):
        return float(np.sum(mlp_forward(p.mean_net, x)[0] * g))

    _, cache = mlp_forward(policy.mean_net, x)
    analytic = mlp_backward(policy.mean_net, cache, g)
    assert finite_difference_check(fn, policy, analytic) < 1e-4


def test_backward_rejects_wrong_gradient_shape(rng):
    net = _random_net([3, 4, 2], rng)
    _, cache = mlp_forward(net, np.zeros((5, 3)))
    with pytest.raises(ShapeError):
        mlp_backward(net, cache, np.zeros((5, 3)))


def test_init_is_orthogonal_with_small_output_layer(rng):
    net = init_mlp([4, 64, 64, 2], rng)
    np.testing.assert_allclose(net.weights[0].T @ net.weights[0], 2.0 * np.eye(4), atol=1e-10)
    np.testing.assert_allclose(net.weights[1] @ net.weights[1].T, 2.0 * np.eye(64), atol=1e-10)
    np.testing.assert_allclose(net.weights[2] @ net.weights[2].T, 1e-4 * np.eye(2), atol=1e-12)
    assert all(np.all(b == 0.0) for b in net.biases)


def test_init_needs_a_hidden_layer(rng):
    with pytest.raises(ArgumentError):
        init_mlp([4, 2], rng)


def test_init_policy_clamps_log_std(rng):
    policy = init_policy(4, 2, [8], rng, log_std_init=5.0)
    np.testing.assert_array_equal(policy.log_std, [LOG_STD_MAX, LOG_STD_MAX])


def test_init_is_reproducible_per_seed():
    a = init_policy(4, 2, [8, 8], np.random.default_rng(7))
    b = init_policy(4, 2, [8, 8], np.random.default_rng(7))
    np.testing.assert_array_equal(policy_to_vector(a), policy_to_vector(b))


def test_log_prob_standard_normal_at_mean():
    assert gaussian_log_prob([0.0], [0.0], [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert gaussian_log_prob([0.0], [0.0], [0.0]) == pytest.approx(-0.91894, abs=1e-5)


def test_log_prob_sums_over_action_dims():
    value = gaussian_log_prob([0.0, 0.0], np.log([1.0, 2.0]), [1.0, 2.0])
    assert value == pytest.approx(-1.0 - math.log(2.0) - math.log(2 * math.pi), abs=1e-12)


def test_log_prob_rejects_non_finite_input():
    with pytest.raises(NumericError):
        gaussian_log_prob([np.nan], [0.0], [0.0])


def test_log_prob_rejects_mismatched_dims():
    with pytest.raises(ShapeError):
        gaussian_log_prob([0.0, 0.0], [0.0], [0.0, 0.0])


def test_entropy_of_unit_gaussian():
    assert gaussian_entropy([0.0]) == pytest.approx(0.5 * (math.log(2 * math.pi) + 1.0))
    assert gaussian_entropy([0.0, 0.0]) == pytest.approx(2 * 1.4189385332, abs=1e-9)


def test_kl_examples():
    assert gaussian_kl([1.0], [0.0], [0.0], [0.0]) == pytest.approx(0.5)
    assert gaussian_kl([0.3, -1.0], [0.1, -0.2], [0.3, -1.0], [0.1, -0.2]) == pytest.approx(0.0, abs=1e-15)


def test_kl_is_non_negative(rng):
    kl = gaussian_kl(*(rng.normal(size=(1000, 3)) for _ in range(4)))
    assert kl.shape == (1000,)
    assert np.all(kl >= 0.0)


def test_sample_statistics(rng):
    draws = gaussian_sample(np.full((20000, 2), [1.0, -2.0]), np.log([0.5, 2.0]), rng)
    np.testing.assert_allclose(draws.mean(axis=0), [1.0, -2.0], atol=0.05)
    np.testing.assert_allclose(draws.std(axis=0), [0.5, 2.0], rtol=0.03)


def test_parameter_vector_layout(rng):
    policy = init_policy(4, 2, [8, 8], rng)
    vector = policy_to_vector(policy)
    assert vector.size == parameter_count([4, 8, 8, 2]) == 8 * 5 + 8 * 9 + 2 * 9 + 2
    np.testing.assert_array_equal(vector[-2:], policy.log_std)
    restored = policy_from_vector([4, 8, 8, 2], vector)
    for a, b in zip(restored.mean_net.weights, policy.mean_net.weights):
        np.testing.assert_array_equal(a, b)


def test_parameter_vector_length_is_checked():
    with pytest.raises(ShapeError):
        policy_from_vector([4, 8, 2], np.zeros(10))


def test_entropy_matches_monte_carlo(rng):
    mean, log_std = np.array([0.4, -1.0]), np.array([-0.7, 0.3])
    draws = gaussian_sample(np.broadcast_to(mean, (200000, 2)), log_std, rng)
    estimate = -np.mean(gaussian_log_prob(mean, log_std, draws))
    assert estimate == pytest.approx(gaussian_entropy(log_std), abs=0.02)


@pytest.mark.parametrize("log_std", [-5.0, -15.0, -40.0])
def test_sample_collapses_to_the_mean(log_std, rng):
    mean = rng.normal(size=(100, 3))
    draws = gaussian_sample(mean, np.full(3, log_std), rng)
    assert np.max(np.abs(draws - mean)) <= 10.0 * math.exp(log_std)
