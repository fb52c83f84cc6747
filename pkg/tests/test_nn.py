import numpy as np
import pytest

from core.errors import ShapeError, StateError, ValidationError
from core.models import BatchNormStats
from core.nn import (
    activation,
    activation_backward,
    batchnorm2d,
    check_row_stochastic,
    conv2d,
    linear,
    pool2d,
    pool2d_backward,
    softmax,
    softmax_cross_entropy,
)


def naive_conv(x, kernel, bias, stride, padding):
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for n in range(b):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, o, i, j] = np.sum(patch * kernel[o]) + bias[o]
    return out


def test_conv2d_matches_loop_oracle(rng):
    for _ in range(1000):
        b, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.choice([1, 3]))
        h, w = rng.integers(k, 7, size=2)
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.normal(size=(b, cin, h, w))
        kernel = rng.normal(size=(cout, cin, k, k))
        bias = rng.normal(size=cout)

        out, _ = conv2d(x, kernel, bias, stride, padding)

        np.testing.assert_allclose(out, naive_conv(x, kernel, bias, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv2d_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        conv2d(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 1, 3, 3)), np.zeros(3))


def test_conv2d_rejects_rank_three_input(rng):
    with pytest.raises(ShapeError):
        conv2d(rng.normal(size=(2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), np.zeros(3))


def naive_linear(x, weight, bias):
    out = np.zeros((x.shape[0], weight.shape[0]))
    for n in range(x.shape[0]):
        for o in range(weight.shape[0]):
            total = bias[o]
            for d in range(x.shape[1]):
                total += x[n, d] * weight[o, d]
            out[n, o] = total
    return out


def test_linear_matches_loop_oracle(rng):
    for _ in range(1000):
        b, din, dout = rng.integers(1, 5, size=3)
        x, weight, bias = rng.normal(size=(b, din)), rng.normal(size=(dout, din)), rng.normal(size=dout)

        out, _ = linear(x, weight, bias)

        np.testing.assert_allclose(out, naive_linear(x, weight, bias), rtol=1e-12, atol=1e-12)


def test_linear_single_layer_matches_matmul(rng):
    x, w, b = rng.normal(size=(5, 128)), rng.normal(size=(100, 128)), rng.normal(size=100)

    out, _ = linear(x, w, b)

    expected = np.array([[x[n] @ w[o] + b[o] for o in range(100)] for n in range(5)])
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_batchnorm_train_output_is_normalized(rng):
    x = 10.0 * rng.normal(size=(4, 3, 5, 6)) + 3.0

    out, _, _ = batchnorm2d(x, np.ones(3), np.zeros(3), BatchNormStats.fresh(3), "train")

    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-5)


def test_batchnorm_running_stats_follow_ema(rng):
    x = rng.normal(size=(2, 2, 3, 3))
    stats = BatchNormStats(mean=np.array([1.0, -1.0]), var=np.array([2.0, 0.5]))

    _, _, updated = batchnorm2d(x, np.ones(2), np.zeros(2), stats, "train")

    n = 2 * 3 * 3
    unbiased = x.var(axis=(0, 2, 3)) * n / (n - 1)
    np.testing.assert_allclose(updated.mean, 0.9 * stats.mean + 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(updated.var, 0.9 * stats.var + 0.1 * unbiased)
    np.testing.assert_array_equal(stats.mean, [1.0, -1.0])


def test_batchnorm_constant_channel_gives_beta():
    x = np.full((2, 1, 3, 3), 7.0)

    out, _, _ = batchnorm2d(x, np.array([2.0]), np.array([0.5]), BatchNormStats.fresh(1), "train")

    np.testing.assert_array_equal(out, 0.5)


def test_batchnorm_infer_needs_populated_stats(rng):
    with pytest.raises(StateError):
        batchnorm2d(rng.normal(size=(1, 2, 2, 2)), np.ones(2), np.zeros(2), BatchNormStats(), "infer")


def test_batchnorm_infer_uses_running_stats_unchanged(rng):
    x = rng.normal(size=(1, 2, 2, 2))
    stats = BatchNormStats(mean=np.array([0.5, -0.5]), var=np.array([4.0, 1.0]))

    out, _, kept = batchnorm2d(x, np.ones(2), np.zeros(2), stats, "infer")

    assert kept is stats
    expected = (x - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, expected)


def test_batchnorm_rejects_unknown_mode(rng):
    with pytest.raises(ValidationError):
        batchnorm2d(rng.normal(size=(1, 1, 2, 2)), np.ones(1), np.zeros(1), BatchNormStats.fresh(1), "eval")


def test_max_pool_floor_division_and_first_tie():
    x = np.zeros((1, 1, 5, 5))
    out, cache = pool2d(x, "max")
    assert out.shape == (1, 1, 2, 2)

    dx = pool2d_backward(np.ones_like(out), cache)
    # all-zero windows: the gradient lands on the top-left cell of each window
    assert dx[0, 0, 0, 0] == 1.0 and dx[0, 0, 0, 1] == 0.0
    assert dx.sum() == 4.0


def test_pool_window_larger_than_input_is_rejected():
    with pytest.raises(ShapeError):
        pool2d(np.zeros((1, 1, 1, 4)), "max", 2)


def test_global_pools(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    avg, _ = pool2d(x, "global_avg")
    mx, _ = pool2d(x, "global_max")
    np.testing.assert_allclose(avg[:, :, 0, 0], x.mean(axis=(2, 3)))
    np.testing.assert_array_equal(mx[:, :, 0, 0], x.max(axis=(2, 3)))


def test_activation_derivatives_at_zero():
    x = np.array([[-1.0, 0.0, 2.0]])
    _, relu_cache = activation(x, "relu")
    _, leaky_cache = activation(x, "leaky_relu", 0.01)

    np.testing.assert_array_equal(activation_backward(np.ones_like(x), relu_cache), [[0.0, 0.0, 1.0]])
    np.testing.assert_array_equal(activation_backward(np.ones_like(x), leaky_cache), [[0.01, 0.01, 1.0]])


def test_sigmoid_is_stable_for_large_inputs():
    out, _ = activation(np.array([[-800.0, 0.0, 800.0]]), "sigmoid")
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[0.0, 0.5, 1.0]])


def test_softmax_cross_entropy_uniform_logits():
    logits = np.zeros((2, 10))
    target = np.eye(10)[[3, 7]]

    loss, grad = softmax_cross_entropy(logits, target)

    assert loss == pytest.approx(np.log(10.0), abs=1e-12)
    np.testing.assert_allclose(grad, (softmax(logits) - target) / 2)


def test_softmax_cross_entropy_rejects_non_stochastic_target():
    with pytest.raises(ValidationError):
        softmax_cross_entropy(np.zeros((1, 3)), np.array([[0.5, 0.2, 0.2]]))


def test_check_row_stochastic_accepts_soft_rows():
    check_row_stochastic(np.array([[0.25, 0.75], [0.5, 0.5]]), "p")
