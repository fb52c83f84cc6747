"""Max feature map, CBAM attention and the attentive max feature map block.

The block pipeline is conv(3x3, 2K) -> MFM -> batchnorm -> AMFM -> max-pool,
where AMFM keeps, per position, the larger of the feature map and its
CBAM-attended copy. Taps (a), (b), (c) expose the map before attention, after
attention and after the competitive max.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any

import numpy as np

from core.errors import ShapeError, ValidationError
from core.models import BatchNormStats, BlockTaps, as_feature_map
from core.nn import (
    BN_EPS,
    BN_MOMENTUM,
    LEAKY_SLOPE,
    Pair,
    activation,
    activation_backward,
    batchnorm2d,
    batchnorm2d_backward,
    conv2d,
    conv2d_backward,
    linear,
    linear_backward,
    pool2d,
    pool2d_backward,
)

CBAM_REDUCTION = 8
CBAM_KERNEL = 7


class BlockKind(str, Enum):
    LEAKY_RELU = "leaky_relu"
    LEAKY_RELU_CBAM = "leaky_relu_cbam"
    MFM = "mfm"
    MFM_CBAM = "mfm_cbam"
    AMFM = "amfm"

    @property
    def uses_mfm(self) -> bool:
        return self in (BlockKind.MFM, BlockKind.MFM_CBAM, BlockKind.AMFM)

    @property
    def uses_attention(self) -> bool:
        return self in (BlockKind.LEAKY_RELU_CBAM, BlockKind.MFM_CBAM, BlockKind.AMFM)


# ---------------------------------------------------------------------------- MFM


@dataclass(slots=True)
class MfmCache:
    first_wins: np.ndarray


def mfm(x: np.ndarray) -> tuple[np.ndarray, MfmCache]:
    """Split channels into halves a1, a2 and keep max(a1, a2) elementwise."""
    as_feature_map(x, "mfm input")
    channels = x.shape[1]
    if channels % 2:
        raise ShapeError(f"mfm needs an even channel count, got {channels}")
    half = channels // 2
    a1, a2 = x[:, :half], x[:, half:]
    first_wins = a1 >= a2
    return np.where(first_wins, a1, a2), MfmCache(first_wins)


def mfm_backward(dout: np.ndarray, cache: MfmCache) -> np.ndarray:
    wins = cache.first_wins
    return np.concatenate([np.where(wins, dout, 0.0), np.where(wins, 0.0, dout)], axis=1)


# --------------------------------------------------------------------------- CBAM


def cbam_hidden_units(channels: int, reduction: int = CBAM_REDUCTION) -> int:
    return channels // min(reduction, channels)


@dataclass(slots=True)
class CbamParams:
    mlp_w1: np.ndarray  # [C/r, C]
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray  # [C, C/r]
    mlp_b2: np.ndarray
    spatial_kernel: np.ndarray  # [1, 2, k, k]
    spatial_bias: np.ndarray  # [1]

    def __post_init__(self) -> None:
        k = self.spatial_kernel.shape[-1]
        if self.spatial_kernel.shape != (1, 2, k, k) or k % 2 == 0:
            raise ShapeError(f"spatial kernel must be [1, 2, k, k] with odd k, got {self.spatial_kernel.shape}")
        hidden, channels = self.mlp_w1.shape
        if self.mlp_w2.shape != (channels, hidden) or hidden < 1:
            raise ShapeError("CBAM MLP weights are inconsistent")

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[1]

    @classmethod
    def init(
        cls,
        channels: int,
        rng: np.random.Generator,
        reduction: int = CBAM_REDUCTION,
        kernel_size: int = CBAM_KERNEL,
    ) -> "CbamParams":
        hidden = cbam_hidden_units(channels, reduction)
        return cls(
            mlp_w1=rng.normal(0.0, np.sqrt(2.0 / channels), size=(hidden, channels)),
            mlp_b1=np.zeros(hidden),
            mlp_w2=rng.normal(0.0, np.sqrt(2.0 / hidden), size=(channels, hidden)),
            mlp_b2=np.zeros(channels),
            spatial_kernel=rng.normal(0.0, np.sqrt(1.0 / (2 * kernel_size**2)), size=(1, 2, kernel_size, kernel_size)),
            spatial_bias=np.zeros(1),
        )

    @classmethod
    def zeros(
        cls, channels: int, reduction: int = CBAM_REDUCTION, kernel_size: int = CBAM_KERNEL
    ) -> "CbamParams":
        hidden = cbam_hidden_units(channels, reduction)
        return cls(
            mlp_w1=np.zeros((hidden, channels)),
            mlp_b1=np.zeros(hidden),
            mlp_w2=np.zeros((channels, hidden)),
            mlp_b2=np.zeros(channels),
            spatial_kernel=np.zeros((1, 2, kernel_size, kernel_size)),
            spatial_bias=np.zeros(1),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(slots=True)
class ChannelAttentionCache:
    avg_pool: Any
    max_pool: Any
    paths: list[tuple[Any, Any, Any]]
    gate: Any
    shape: tuple[int, ...]


def channel_attention(
    x: np.ndarray, p: CbamParams
) -> tuple[np.ndarray, ChannelAttentionCache]:
    """gate = sigmoid(MLP(global_avg(x)) + MLP(global_max(x))), shape [B, C, 1, 1]."""
    as_feature_map(x, "channel attention input")
    b, c = x.shape[:2]
    if c != p.channels:
        raise ShapeError(f"channel attention built for {p.channels} channels, got {c}")
    avg, avg_cache = pool2d(x, "global_avg")
    mx, max_cache = pool2d(x, "global_max")

    z = np.zeros((b, c))
    paths = []
    for pooled in (avg, mx):
        h, first = linear(pooled.reshape(b, c), p.mlp_w1, p.mlp_b1)
        r, relu_cache = activation(h, "relu")
        o, second = linear(r, p.mlp_w2, p.mlp_b2)
        z = z + o
        paths.append((first, relu_cache, second))
    gate, gate_cache = activation(z, "sigmoid")
    return gate[:, :, None, None], ChannelAttentionCache(avg_cache, max_cache, paths, gate_cache, x.shape)


def channel_attention_backward(
    dgate: np.ndarray, cache: ChannelAttentionCache
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    b, c = cache.shape[:2]
    dz = activation_backward(dgate.reshape(b, c), cache.gate)
    grads = {"mlp_w1": 0.0, "mlp_b1": 0.0, "mlp_w2": 0.0, "mlp_b2": 0.0}
    dpooled = []
    for first, relu_cache, second in cache.paths:
        dr, dw2, db2 = linear_backward(dz, second)
        dh = activation_backward(dr, relu_cache)
        dv, dw1, db1 = linear_backward(dh, first)
        grads["mlp_w1"] = grads["mlp_w1"] + dw1
        grads["mlp_b1"] = grads["mlp_b1"] + db1
        grads["mlp_w2"] = grads["mlp_w2"] + dw2
        grads["mlp_b2"] = grads["mlp_b2"] + db2
        dpooled.append(dv[:, :, None, None])
    dx = pool2d_backward(dpooled[0], cache.avg_pool) + pool2d_backward(dpooled[1], cache.max_pool)
    return dx, grads


@dataclass(slots=True)
class SpatialAttentionCache:
    argmax: np.ndarray
    conv: Any
    gate: Any
    shape: tuple[int, ...]


def spatial_attention(
    x: np.ndarray, p: CbamParams
) -> tuple[np.ndarray, SpatialAttentionCache]:
    """gate = sigmoid(conv_kxk([mean_c(x); max_c(x)])), shape [B, 1, T, F]."""
    as_feature_map(x, "spatial attention input")
    k = p.spatial_kernel.shape[-1]
    idx = x.argmax(axis=1)[:, None]
    stacked = np.concatenate(
        [x.mean(axis=1, keepdims=True), np.take_along_axis(x, idx, axis=1)], axis=1
    )
    z, conv_cache = conv2d(stacked, p.spatial_kernel, p.spatial_bias, 1, (k - 1) // 2)
    gate, gate_cache = activation(z, "sigmoid")
    return gate, SpatialAttentionCache(idx, conv_cache, gate_cache, x.shape)


def spatial_attention_backward(
    dgate: np.ndarray, cache: SpatialAttentionCache
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    channels = cache.shape[1]
    dz = activation_backward(dgate, cache.gate)
    dstacked, dkernel, dbias = conv2d_backward(dz, cache.conv)
    dx = np.repeat(dstacked[:, :1] / channels, channels, axis=1)
    dmax = np.zeros(cache.shape, dtype=dx.dtype)
    np.put_along_axis(dmax, cache.argmax, dstacked[:, 1:2], axis=1)
    return dx + dmax, {"spatial_kernel": dkernel, "spatial_bias": dbias}


@dataclass(slots=True)
class CbamCache:
    x: np.ndarray
    channel_gate: np.ndarray
    channel: ChannelAttentionCache
    refined: np.ndarray
    spatial_gate: np.ndarray
    spatial: SpatialAttentionCache


def cbam(x: np.ndarray, p: CbamParams) -> tuple[np.ndarray, CbamCache]:
    """Channel gate first, then spatial gate on the channel-refined map."""
    channel_gate, channel_cache = channel_attention(x, p)
    refined = channel_gate * x
    spatial_gate, spatial_cache = spatial_attention(refined, p)
    out = spatial_gate * refined
    return out, CbamCache(x, channel_gate, channel_cache, refined, spatial_gate, spatial_cache)


def cbam_backward(
    dout: np.ndarray, cache: CbamCache
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    dspatial_gate = (dout * cache.refined).sum(axis=1, keepdims=True)
    drefined_direct = dout * cache.spatial_gate
    drefined_gate, spatial_grads = spatial_attention_backward(dspatial_gate, cache.spatial)
    drefined = drefined_direct + drefined_gate

    dchannel_gate = (drefined * cache.x).sum(axis=(2, 3), keepdims=True)
    dx_gate, channel_grads = channel_attention_backward(dchannel_gate, cache.channel)
    return drefined * cache.channel_gate + dx_gate, {**channel_grads, **spatial_grads}


# --------------------------------------------------------------------------- AMFM


@dataclass(slots=True)
class AmfmCache:
    identity_wins: np.ndarray
    attended: np.ndarray
    cbam: CbamCache


def amfm(x: np.ndarray, p: CbamParams) -> tuple[np.ndarray, AmfmCache]:
    """Elementwise max(x, CBAM(x)); ties go to the identity branch."""
    attended, cbam_cache = cbam(x, p)
    identity_wins = x >= attended
    return np.where(identity_wins, x, attended), AmfmCache(identity_wins, attended, cbam_cache)


def amfm_backward(
    dout: np.ndarray, cache: AmfmCache
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    wins = cache.identity_wins
    dx_attended, grads = cbam_backward(np.where(wins, 0.0, dout), cache.cbam)
    return np.where(wins, dout, 0.0) + dx_attended, grads


# -------------------------------------------------------------------------- block


@dataclass(slots=True)
class AmfmBlockParams:
    conv_weight: np.ndarray  # [2K, Cin, 3, 3] for MFM kinds, [K, Cin, 3, 3] otherwise
    conv_bias: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    running: BatchNormStats = field(default_factory=BatchNormStats)
    cbam: CbamParams | None = None

    @property
    def width(self) -> int:
        return self.bn_gamma.shape[0]

    @classmethod
    def init(
        cls,
        in_channels: int,
        width: int,
        rng: np.random.Generator,
        kind: BlockKind = BlockKind.AMFM,
        reduction: int = CBAM_REDUCTION,
        kernel_size: int = CBAM_KERNEL,
    ) -> "AmfmBlockParams":
        conv_out = 2 * width if kind.uses_mfm else width
        fan_in = in_channels * 9
        return cls(
            conv_weight=rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(conv_out, in_channels, 3, 3)),
            conv_bias=np.zeros(conv_out),
            bn_gamma=np.ones(width),
            bn_beta=np.zeros(width),
            running=BatchNormStats.fresh(width),
            cbam=CbamParams.init(width, rng, reduction, kernel_size) if kind.uses_attention else None,
        )

    def tensors(self) -> dict[str, np.ndarray]:
        """Trainable tensors keyed the same way block gradients are."""
        named = {
            "conv.weight": self.conv_weight,
            "conv.bias": self.conv_bias,
            "bn.gamma": self.bn_gamma,
            "bn.beta": self.bn_beta,
        }
        if self.cbam is not None:
            named.update({f"cbam.{k}": v for k, v in self.cbam.as_dict().items()})
        return named


@dataclass(slots=True)
class BlockCache:
    kind: BlockKind
    steps: list[tuple[str, Any]]


@dataclass(slots=True)
class BlockResult:
    out: np.ndarray
    taps: BlockTaps | None
    running: BatchNormStats
    cache: BlockCache


def amfm_block(
    x: np.ndarray,
    p: AmfmBlockParams,
    pool: Pair = (2, 2),
    mode: str = "train",
    kind: BlockKind = BlockKind.AMFM,
    slope: float = LEAKY_SLOPE,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> BlockResult:
    """Run one convolutional block; only the AMFM kind produces taps."""
    kind = BlockKind(kind)
    if kind.uses_attention and p.cbam is None:
        raise ValidationError(f"block kind {kind.value} needs CBAM parameters")
    steps: list[tuple[str, Any]] = []

    h, conv_cache = conv2d(x, p.conv_weight, p.conv_bias, 1, 1)
    steps.append(("conv", conv_cache))
    if kind.uses_mfm:
        h, mfm_cache = mfm(h)
        steps.append(("mfm", mfm_cache))
    if h.shape[1] != p.width:
        raise ShapeError(f"block produced {h.shape[1]} channels, batchnorm expects {p.width}")
    h, bn_cache, running = batchnorm2d(h, p.bn_gamma, p.bn_beta, p.running, mode, eps, momentum)
    steps.append(("bn", bn_cache))
    if not kind.uses_mfm:
        h, act_cache = activation(h, "leaky_relu", slope)
        steps.append(("act", act_cache))

    taps = None
    if kind is BlockKind.AMFM:
        pre_attention = h
        h, amfm_cache = amfm(pre_attention, p.cbam)
        steps.append(("amfm", amfm_cache))
        taps = BlockTaps(a=pre_attention, b=amfm_cache.attended, c=h)
    elif kind.uses_attention:
        h, cbam_cache = cbam(h, p.cbam)
        steps.append(("cbam", cbam_cache))

    out, pool_cache = pool2d(h, "max", pool, pool)
    steps.append(("pool", pool_cache))
    return BlockResult(out, taps, running, BlockCache(kind, steps))


def amfm_block_backward(
    dout: np.ndarray, cache: BlockCache
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Return dx and gradients keyed like ``AmfmBlockParams.tensors()``."""
    grads: dict[str, np.ndarray] = {}
    d = dout
    for name, step in reversed(cache.steps):
        if name == "pool":
            d = pool2d_backward(d, step)
        elif name == "amfm":
            d, attention = amfm_backward(d, step)
            grads.update({f"cbam.{k}": v for k, v in attention.items()})
        elif name == "cbam":
            d, attention = cbam_backward(d, step)
            grads.update({f"cbam.{k}": v for k, v in attention.items()})
        elif name == "act":
            d = activation_backward(d, step)
        elif name == "bn":
            d, grads["bn.gamma"], grads["bn.beta"] = batchnorm2d_backward(d, step)
        elif name == "mfm":
            d = mfm_backward(d, step)
        elif name == "conv":
            d, grads["conv.weight"], grads["conv.bias"] = conv2d_backward(d, step)
    return d, grads
