"""Model graph: a stack of convolutional blocks, global average pooling and a
strategy-specific dense head, with every trainable tensor held in a named
``Param`` slot."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from core.amfm import (
    CBAM_KERNEL,
    CBAM_REDUCTION,
    AmfmBlockParams,
    BlockKind,
    CbamParams,
    amfm_block,
    amfm_block_backward,
)
from core.errors import CheckpointShapeError, ValidationError
from core.models import BatchNormStats, BlockTaps, Param
from core.multitask import (
    HIDDEN_UNITS,
    HeadCache,
    HeadSpec,
    Strategy,
    build_head,
    head_backward,
    head_forward,
    parse_strategy,
)
from core.nn import BN_EPS, BN_MOMENTUM, LEAKY_SLOPE, pool2d, pool2d_backward
from core.utils import logger

VELOCITY_SUFFIX = "@velocity"


@dataclass(frozen=True, slots=True)
class ArchitectureConfig:
    """Default trunk: four AMFM blocks with post-MFM widths 32/64/96/128."""

    widths: tuple[int, ...] = (32, 64, 96, 128)
    block_kind: str = BlockKind.AMFM.value
    in_channels: int = 1
    pool: tuple[int, int] = (2, 2)
    cbam_reduction: int = CBAM_REDUCTION
    spatial_kernel: int = CBAM_KERNEL
    hidden_units: int = HIDDEN_UNITS
    leaky_slope: float = LEAKY_SLOPE
    bn_eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM
    sequential_detach: bool = False

    def __post_init__(self) -> None:
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValidationError(f"architecture widths must be positive, got {self.widths}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ValidationError(f"spatial kernel size must be odd, got {self.spatial_kernel}")
        if self.cbam_reduction < 1 or self.in_channels < 1 or self.hidden_units < 1:
            raise ValidationError("architecture sizes must be positive")
        if len(self.pool) != 2 or min(self.pool) < 1:
            raise ValidationError(f"pool must be a pair of positive ints, got {self.pool}")
        try:
            BlockKind(self.block_kind)
        except ValueError as exc:
            raise ValidationError(f"unknown block kind {self.block_kind!r}") from exc

    @property
    def kind(self) -> BlockKind:
        return BlockKind(self.block_kind)


@dataclass(slots=True)
class ForwardPass:
    logits10: np.ndarray
    logits3: np.ndarray | None
    taps: list[BlockTaps | None]
    block_caches: list[Any]
    gap_cache: Any
    head_cache: HeadCache
    features: np.ndarray = field(default=None)


def _slot_of(name: str) -> str:
    return name.rsplit(".", 1)[0]


class ModelGraph:
    def __init__(
        self,
        arch: ArchitectureConfig,
        strategy: Strategy | str,
        rng: np.random.Generator,
    ) -> None:
        self.arch = arch
        self.strategy = parse_strategy(strategy)
        self.head: HeadSpec = build_head(self.strategy, arch.widths[-1], arch.hidden_units)
        self.params: dict[str, Param] = {}
        self.running: list[BatchNormStats] = []

        in_channels = arch.in_channels
        for index, width in enumerate(arch.widths):
            block = AmfmBlockParams.init(
                in_channels, width, rng, arch.kind, arch.cbam_reduction, arch.spatial_kernel
            )
            for key, tensor in block.tensors().items():
                self._add(f"block{index}.{key}", tensor)
            self.running.append(block.running)
            in_channels = width
        for slot in self.head.slots:
            weight, bias = self._dense_init(slot.in_dim, slot.out_dim, rng)
            self._add(f"{slot.name}.weight", weight)
            self._add(f"{slot.name}.bias", bias)

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValidationError(f"duplicate parameter slot {name}")
        self.params[name] = Param(name=name, value=np.array(value, dtype=np.float64))

    @staticmethod
    def _dense_init(in_dim: int, out_dim: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        return rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(out_dim, in_dim)), np.zeros(out_dim)

    # ----------------------------------------------------------------- views

    @property
    def n_blocks(self) -> int:
        return len(self.arch.widths)

    def block_params(self, index: int) -> AmfmBlockParams:
        def value(key: str) -> np.ndarray:
            return self.params[f"block{index}.{key}"].value

        cbam = None
        if self.arch.kind.uses_attention:
            cbam = CbamParams(
                mlp_w1=value("cbam.mlp_w1"),
                mlp_b1=value("cbam.mlp_b1"),
                mlp_w2=value("cbam.mlp_w2"),
                mlp_b2=value("cbam.mlp_b2"),
                spatial_kernel=value("cbam.spatial_kernel"),
                spatial_bias=value("cbam.spatial_bias"),
            )
        return AmfmBlockParams(
            conv_weight=value("conv.weight"),
            conv_bias=value("conv.bias"),
            bn_gamma=value("bn.gamma"),
            bn_beta=value("bn.beta"),
            running=self.running[index],
            cbam=cbam,
        )

    def _head_tensors(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.params.items() if name.startswith("head.")}

    # ------------------------------------------------------------ forward/back

    def forward(self, x: np.ndarray, mode: str = "train", keep_taps: bool = False) -> ForwardPass:
        arch = self.arch
        h = x
        taps: list[BlockTaps | None] = []
        caches = []
        for index in range(self.n_blocks):
            result = amfm_block(
                h,
                self.block_params(index),
                arch.pool,
                mode,
                arch.kind,
                arch.leaky_slope,
                arch.bn_eps,
                arch.bn_momentum,
            )
            if mode == "train":
                self.running[index] = result.running
            taps.append(result.taps if keep_taps else None)
            caches.append(result.cache)
            h = result.out
        pooled, gap_cache = pool2d(h, "global_avg")
        features = pooled.reshape(pooled.shape[0], pooled.shape[1])
        logits10, logits3, head_cache = head_forward(
            self.head, self._head_tensors(), features, arch.leaky_slope, arch.sequential_detach
        )
        return ForwardPass(logits10, logits3, taps, caches, gap_cache, head_cache, features)

    def backward(
        self, fp: ForwardPass, dlogits10: np.ndarray, dlogits3: np.ndarray | None = None
    ) -> np.ndarray:
        """Accumulate gradients into every Param; returns d input."""
        dfeatures, grads = head_backward(dlogits10, dlogits3, fp.head_cache)
        for name, grad in grads.items():
            self.params[name].grad += grad
        dh = pool2d_backward(dfeatures[:, :, None, None], fp.gap_cache)
        for index in reversed(range(self.n_blocks)):
            dh, block_grads = amfm_block_backward(dh, fp.block_caches[index])
            for key, grad in block_grads.items():
                self.params[f"block{index}.{key}"].grad += grad
        return dh

    def shared_grad_norms(
        self, fp: ForwardPass, grad10: np.ndarray, grad3: np.ndarray
    ) -> tuple[float, float]:
        """Norms of each task's gradient at the last shared layer, ordered (3-class, 10-class)."""
        _, only3 = head_backward(np.zeros_like(grad10), grad3, fp.head_cache)
        _, only10 = head_backward(grad10, np.zeros_like(grad3), fp.head_cache)
        return (
            float(np.linalg.norm(only3["head.shared.weight"])),
            float(np.linalg.norm(only10["head.shared.weight"])),
        )

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def reinit_slots(self, slots: Iterable[str], rng: np.random.Generator) -> None:
        for slot_name in slots:
            if slot_name not in self.head.names:
                continue
            slot = self.head.slot(slot_name)
            weight, bias = self._dense_init(slot.in_dim, slot.out_dim, rng)
            for suffix, value in (("weight", weight), ("bias", bias)):
                param = self.params[f"{slot_name}.{suffix}"]
                param.value[...] = value
                param.velocity[...] = 0.0
                param.grad[...] = 0.0

    # --------------------------------------------------------------- state

    def tensor_table(self) -> dict[str, np.ndarray]:
        """Copies of parameter values, velocities and running stats, in slot order."""
        table: dict[str, np.ndarray] = {}
        for name, param in self.params.items():
            table[name] = param.value.copy()
        for name, param in self.params.items():
            table[f"{name}{VELOCITY_SUFFIX}"] = param.velocity.copy()
        for index, stats in enumerate(self.running):
            table[f"block{index}.bn.running_mean"] = stats.mean.copy()
            table[f"block{index}.bn.running_var"] = stats.var.copy()
        return table

    def load_tensor_table(self, table: dict[str, np.ndarray]) -> None:
        """Load matching tensors; slots present on only one side are reported, not fatal."""
        expected = self.tensor_table()
        for name, current in expected.items():
            if name not in table:
                continue
            if table[name].shape != current.shape:
                raise CheckpointShapeError(
                    f"tensor {name} has shape {table[name].shape}, model expects {current.shape}"
                )
        missing = sorted({_slot_of(n.removesuffix(VELOCITY_SUFFIX)) for n in expected if n not in table})
        extra = sorted({_slot_of(n.removesuffix(VELOCITY_SUFFIX)) for n in table if n not in expected})
        if missing or extra:
            logger.warning(
                "Checkpoint head slots differ from the model: missing=%s extra=%s", missing, extra
            )

        for name, param in self.params.items():
            if name in table:
                param.value[...] = table[name]
            velocity = table.get(f"{name}{VELOCITY_SUFFIX}")
            if velocity is not None:
                param.velocity[...] = velocity
        for index in range(self.n_blocks):
            mean = table.get(f"block{index}.bn.running_mean")
            var = table.get(f"block{index}.bn.running_var")
            if mean is not None and var is not None:
                self.running[index] = BatchNormStats(mean=mean.copy(), var=var.copy())

    def slot_breakdown(self) -> dict[str, int]:
        breakdown: dict[str, int] = {}
        for name, param in self.params.items():
            slot = _slot_of(name)
            breakdown[slot] = breakdown.get(slot, 0) + param.size
        return breakdown


def count_params(graph: ModelGraph) -> int:
    """Trainable element count; running statistics are not parameters."""
    return sum(param.size for param in graph.params.values())
