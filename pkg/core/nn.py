"""Differentiable layer primitives with hand-derived backward passes.

Every forward returns ``(output, cache)`` and the matching ``*_backward``
takes the upstream gradient plus that cache. Inputs are never mutated, so the
functions are safe to call from several threads at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, logsumexp

from core.errors import ShapeError, StateError, ValidationError
from core.models import BatchNormStats, as_feature_map

Pair = tuple[int, int]
PoolKind = Literal["max", "avg", "global_max", "global_avg"]
ActivationKind = Literal["sigmoid", "relu", "leaky_relu"]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.01


def _pair(value: int | Pair) -> Pair:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    first, second = value
    return int(first), int(second)


def _windows(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Strided [B, C, Ho, Wo, kh, kw] view of every window, no copy."""
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def _scatter_windows(
    target: np.ndarray, contrib: np.ndarray, i: int, j: int, sh: int, sw: int
) -> None:
    ho, wo = contrib.shape[2], contrib.shape[3]
    target[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += contrib


# --------------------------------------------------------------------------- conv


@dataclass(slots=True)
class Conv2dCache:
    windows: np.ndarray
    kernel: np.ndarray
    input_shape: tuple[int, ...]
    padded_shape: tuple[int, ...]
    stride: Pair
    padding: Pair


def conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray,
    stride: int | Pair = 1,
    padding: int | Pair = 0,
) -> tuple[np.ndarray, Conv2dCache]:
    """Cross-correlation of a [B, Cin, T, F] map with a [Cout, Cin, kh, kw] kernel."""
    as_feature_map(x, "conv2d input")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [Cout, Cin, kh, kw], got {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d expects {cin} input channels, got {x.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"invalid stride {stride} or padding {padding}")
    ho = (x.shape[2] + 2 * ph - kh) // sh + 1
    wo = (x.shape[3] + 2 * pw - kw) // sw + 1
    if x.shape[2] + 2 * ph < kh or x.shape[3] + 2 * pw < kw or ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output extent would be non-positive for input {x.shape}, kernel {kernel.shape}"
        )

    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    windows = _windows(xp, kh, kw, sh, sw)
    out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1)) + bias[None, :, None, None]
    return out, Conv2dCache(windows, kernel, x.shape, xp.shape, (sh, sw), (ph, pw))


def conv2d_backward(
    dout: np.ndarray, cache: Conv2dCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (dx, dkernel, dbias)."""
    kernel = cache.kernel
    _, _, kh, kw = kernel.shape
    sh, sw = cache.stride
    ph, pw = cache.padding
    h, w = cache.input_shape[2], cache.input_shape[3]

    dbias = dout.sum(axis=(0, 2, 3))
    dkernel = np.tensordot(dout, cache.windows, axes=([0, 2, 3], [0, 2, 3]))
    dcols = np.tensordot(dout, kernel, axes=([1], [0]))  # [B, Ho, Wo, Cin, kh, kw]
    dxp = np.zeros(cache.padded_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            _scatter_windows(dxp, np.moveaxis(dcols[..., i, j], 3, 1), i, j, sh, sw)
    return dxp[:, :, ph : ph + h, pw : pw + w], dkernel, dbias


# ------------------------------------------------------------------------- linear


@dataclass(slots=True)
class LinearCache:
    x: np.ndarray
    weight: np.ndarray


def linear(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray
) -> tuple[np.ndarray, LinearCache]:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects [B, D] input and [Dout, D] weight, got {x.shape}, {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"linear inner dimensions disagree: {x.shape} vs {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
    return x @ weight.T + bias, LinearCache(x, weight)


def linear_backward(
    dout: np.ndarray, cache: LinearCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (dx, dweight, dbias)."""
    return dout @ cache.weight, dout.T @ cache.x, dout.sum(axis=0)


# ---------------------------------------------------------------------- batchnorm


@dataclass(slots=True)
class BatchNormCache:
    xhat: np.ndarray
    gamma: np.ndarray
    inv_std: np.ndarray
    mode: str


def batchnorm2d(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    stats: BatchNormStats,
    mode: Literal["train", "infer"] = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> tuple[np.ndarray, BatchNormCache, BatchNormStats]:
    """Per-channel normalization over B x T x F.

    Returns the output, the backward cache and the running statistics to keep
    (a new object in train mode, ``stats`` itself in infer mode).
    """
    as_feature_map(x, "batchnorm input")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batchnorm gamma/beta must have shape ({channels},)")
    axes = (0, 2, 3)

    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // channels
        unbiased = var * n / (n - 1) if n > 1 else var
        if stats.populated:
            updated = BatchNormStats(
                mean=(1.0 - momentum) * stats.mean + momentum * mean,
                var=(1.0 - momentum) * stats.var + momentum * unbiased,
            )
        else:
            updated = BatchNormStats(mean=mean.copy(), var=unbiased.copy())
    elif mode == "infer":
        if not stats.populated:
            raise StateError("batchnorm in infer mode needs populated running statistics")
        mean, var, updated = stats.mean, stats.var, stats
    else:
        raise ValidationError(f"unknown batchnorm mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, BatchNormCache(xhat, gamma, inv_std, mode), updated


def batchnorm2d_backward(
    dout: np.ndarray, cache: BatchNormCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (dx, dgamma, dbeta); train mode includes the batch-statistics terms."""
    axes = (0, 2, 3)
    xhat = cache.xhat
    inv_std = cache.inv_std[None, :, None, None]
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * cache.gamma[None, :, None, None]
    if cache.mode == "infer":
        return dxhat * inv_std, dgamma, dbeta
    n = xhat.size // xhat.shape[1]
    dx = (inv_std / n) * (
        n * dxhat
        - dxhat.sum(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return dx, dgamma, dbeta


# ------------------------------------------------------------------------ pooling


@dataclass(slots=True)
class PoolCache:
    kind: str
    input_shape: tuple[int, ...]
    argmax: np.ndarray | None
    window: Pair
    stride: Pair


def pool2d(
    x: np.ndarray,
    kind: PoolKind = "max",
    window: int | Pair = 2,
    stride: int | Pair | None = None,
) -> tuple[np.ndarray, PoolCache]:
    """Windowed or global pooling. Max ties resolve to the first row-major position."""
    as_feature_map(x, "pool2d input")
    b, c, t, f = x.shape

    if kind in ("global_max", "global_avg"):
        flat = x.reshape(b, c, t * f)
        if kind == "global_avg":
            return flat.mean(axis=2)[:, :, None, None], PoolCache(kind, x.shape, None, (t, f), (t, f))
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[:, :, None], axis=2)
        return out[:, :, :, None], PoolCache(kind, x.shape, idx, (t, f), (t, f))

    if kind not in ("max", "avg"):
        raise ValidationError(f"unknown pooling kind {kind!r}")
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    if kh > t or kw > f:
        raise ShapeError(f"pool window {(kh, kw)} larger than input extent {(t, f)}")
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise ShapeError(f"invalid pool window {window} or stride {stride}")

    windows = _windows(x, kh, kw, sh, sw)
    flat = windows.reshape(*windows.shape[:4], kh * kw)
    if kind == "avg":
        return flat.mean(axis=-1), PoolCache(kind, x.shape, None, (kh, kw), (sh, sw))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, PoolCache(kind, x.shape, idx, (kh, kw), (sh, sw))


def pool2d_backward(dout: np.ndarray, cache: PoolCache) -> np.ndarray:
    b, c, t, f = cache.input_shape
    if cache.kind == "global_avg":
        return np.broadcast_to(dout / (t * f), cache.input_shape).copy()
    if cache.kind == "global_max":
        dflat = np.zeros((b, c, t * f), dtype=dout.dtype)
        np.put_along_axis(dflat, cache.argmax[:, :, None], dout.reshape(b, c, 1), axis=2)
        return dflat.reshape(cache.input_shape)

    kh, kw = cache.window
    sh, sw = cache.stride
    dx = np.zeros(cache.input_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            if cache.kind == "avg":
                contrib = dout / (kh * kw)
            else:
                contrib = np.where(cache.argmax == i * kw + j, dout, 0.0)
            _scatter_windows(dx, contrib, i, j, sh, sw)
    return dx


# -------------------------------------------------------------------- activations


@dataclass(slots=True)
class ActivationCache:
    kind: str
    saved: np.ndarray
    slope: float


def activation(
    x: np.ndarray, kind: ActivationKind, slope: float = LEAKY_SLOPE
) -> tuple[np.ndarray, ActivationCache]:
    if kind == "sigmoid":
        out = expit(x)
        return out, ActivationCache(kind, out, slope)
    if kind == "relu":
        return np.maximum(x, 0.0), ActivationCache(kind, x, slope)
    if kind == "leaky_relu":
        return np.where(x > 0, x, slope * x), ActivationCache(kind, x, slope)
    raise ValidationError(f"unknown activation {kind!r}")


def activation_backward(dout: np.ndarray, cache: ActivationCache) -> np.ndarray:
    if cache.kind == "sigmoid":
        s = cache.saved
        return dout * s * (1.0 - s)
    if cache.kind == "relu":
        return dout * (cache.saved > 0)
    # derivative at exactly 0 is the slope
    return dout * np.where(cache.saved > 0, 1.0, cache.slope)


# ------------------------------------------------------------------------- losses


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def check_row_stochastic(p: np.ndarray, what: str, tol: float = 1e-6) -> None:
    if p.ndim != 2:
        raise ShapeError(f"{what} must be [B, C], got {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > tol):
        raise ValidationError(f"{what} rows must be non-negative and sum to 1")


def softmax_cross_entropy(
    logits: np.ndarray, target: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean soft-target cross-entropy and its gradient ``(softmax - target) / B``."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} and target {target.shape} disagree")
    check_row_stochastic(target, "cross-entropy target")
    batch = logits.shape[0]
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    loss = float(-(target * log_probs).sum() / batch)
    grad = (np.exp(log_probs) - target) / batch
    return loss, grad
