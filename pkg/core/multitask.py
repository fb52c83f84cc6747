"""Scene taxonomy and the joint 10-class / 3-class learning strategies.

Five strategies share one trunk and differ only in the dense head placed on
top of it:

- ``single_task``: shared hidden layer, 10-way output.
- ``conventional_mtl``: shared hidden layer, then a 10-way and a 3-way output.
- ``extended_mtl``: like conventional, plus one extra hidden layer per task.
- ``sequential_mtl``: the 3-way logits are appended to the shared hidden
  vector that feeds the 10-way output.
- ``pretrain``: the extended head, trained on the 3-class task first and then
  fine-tuned on the 10-class task (see ``pretrain_schedule``).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Any

import numpy as np

from core.errors import ShapeError, ValidationError
from core.nn import (
    LEAKY_SLOPE,
    activation,
    activation_backward,
    check_row_stochastic,
    linear,
    linear_backward,
    softmax_cross_entropy,
)
from core.utils import logger

if TYPE_CHECKING:
    from core.network import ModelGraph

HIDDEN_UNITS = 100


class SceneLabel(str, Enum):
    AIRPORT = "airport"
    SHOPPING_MALL = "shopping_mall"
    METRO_STATION = "metro_station"
    STREET_PEDESTRIAN = "street_pedestrian"
    PUBLIC_SQUARE = "public_square"
    STREET_TRAFFIC = "street_traffic"
    TRAM = "tram"
    BUS = "bus"
    METRO = "metro"
    PARK = "park"

    @property
    def code(self) -> int:
        return SCENES.index(self)


class AbstractLabel(str, Enum):
    INDOOR = "indoor"
    OUTDOOR = "outdoor"
    TRANSPORTATION = "transportation"

    @property
    def code(self) -> int:
        return ABSTRACTS.index(self)


SCENES: tuple[SceneLabel, ...] = tuple(SceneLabel)
ABSTRACTS: tuple[AbstractLabel, ...] = tuple(AbstractLabel)

_PARENTS = {
    SceneLabel.AIRPORT: AbstractLabel.INDOOR,
    SceneLabel.SHOPPING_MALL: AbstractLabel.INDOOR,
    SceneLabel.METRO_STATION: AbstractLabel.INDOOR,
    SceneLabel.STREET_PEDESTRIAN: AbstractLabel.OUTDOOR,
    SceneLabel.PUBLIC_SQUARE: AbstractLabel.OUTDOOR,
    SceneLabel.STREET_TRAFFIC: AbstractLabel.OUTDOOR,
    SceneLabel.PARK: AbstractLabel.OUTDOOR,
    SceneLabel.TRAM: AbstractLabel.TRANSPORTATION,
    SceneLabel.BUS: AbstractLabel.TRANSPORTATION,
    SceneLabel.METRO: AbstractLabel.TRANSPORTATION,
}


def parent_of(scene: SceneLabel | str) -> AbstractLabel:
    return _PARENTS[SceneLabel(scene)]


PARENT_INDEX = np.array([parent_of(s).code for s in SCENES])
# [10, 3] one-hot rows: scene -> parent
TAXONOMY = np.eye(len(ABSTRACTS))[PARENT_INDEX]


def marginalize(p10: np.ndarray) -> np.ndarray:
    """Sum a [B, 10] scene distribution over each parent class."""
    return p10 @ TAXONOMY


@dataclass(slots=True)
class LabelPair:
    scene: np.ndarray  # [10], possibly soft
    abstract: np.ndarray  # [3]

    @classmethod
    def from_scene(cls, scene: SceneLabel | str) -> "LabelPair":
        label = SceneLabel(scene)
        return cls(
            scene=np.eye(len(SCENES))[label.code],
            abstract=np.eye(len(ABSTRACTS))[parent_of(label).code],
        )

    @property
    def scene_index(self) -> int:
        return int(np.argmax(self.scene))

    @property
    def abstract_index(self) -> int:
        return int(np.argmax(self.abstract))


class Strategy(str, Enum):
    SINGLE_TASK = "single_task"
    PRETRAIN = "pretrain"
    CONVENTIONAL_MTL = "conventional_mtl"
    EXTENDED_MTL = "extended_mtl"
    SEQUENTIAL_MTL = "sequential_mtl"

    @property
    def emits_abstract(self) -> bool:
        return self is not Strategy.SINGLE_TASK


DEFAULT_STRATEGY = Strategy.EXTENDED_MTL


def parse_strategy(value: Strategy | str) -> Strategy:
    try:
        return Strategy(value)
    except ValueError as exc:
        raise ValidationError(f"unknown strategy {value!r}") from exc


@dataclass(frozen=True, slots=True)
class LossWeights:
    w3: float = 1.0
    w10: float = 5.0

    def __post_init__(self) -> None:
        if self.w3 < 0 or self.w10 < 0:
            raise ValidationError(f"loss weights must be non-negative, got ({self.w3}, {self.w10})")
        if self.w3 == 0 and self.w10 == 0:
            raise ValidationError("loss weights must not both be zero")

    @classmethod
    def from_ratio(cls, ratio: str) -> "LossWeights":
        try:
            left, right = (float(part) for part in ratio.split(":"))
        except ValueError as exc:
            raise ValidationError(f"loss ratio must look like '1:5', got {ratio!r}") from exc
        return cls(w3=left, w10=right)


RATIO_PRESETS = {f"1:{k}": LossWeights(1.0, float(k)) for k in range(1, 6)}


@dataclass(frozen=True, slots=True)
class FusionConfig:
    enabled: bool = False
    beta: float = 1.0

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValidationError(f"fusion beta must be non-negative, got {self.beta}")


# ------------------------------------------------------------------------- heads


@dataclass(frozen=True, slots=True)
class DenseSlot:
    name: str
    in_dim: int
    out_dim: int

    @property
    def size(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


@dataclass(frozen=True, slots=True)
class HeadSpec:
    strategy: Strategy
    slots: tuple[DenseSlot, ...]

    def slot(self, name: str) -> DenseSlot:
        for slot in self.slots:
            if slot.name == name:
                return slot
        raise KeyError(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(slot.name for slot in self.slots)


TASK10_SLOTS = ("head.hidden10", "head.out10")


def build_head(strategy: Strategy | str, trunk_dim: int, hidden: int = HIDDEN_UNITS) -> HeadSpec:
    strategy = parse_strategy(strategy)
    if trunk_dim < 1:
        raise ValidationError(f"trunk_dim must be positive, got {trunk_dim}")
    shared = DenseSlot("head.shared", trunk_dim, hidden)

    if strategy is Strategy.SINGLE_TASK:
        slots = (shared, DenseSlot("head.out10", hidden, 10))
    elif strategy is Strategy.CONVENTIONAL_MTL:
        slots = (shared, DenseSlot("head.out10", hidden, 10), DenseSlot("head.out3", hidden, 3))
    elif strategy in (Strategy.EXTENDED_MTL, Strategy.PRETRAIN):
        slots = (
            shared,
            DenseSlot("head.hidden10", hidden, hidden),
            DenseSlot("head.out10", hidden, 10),
            DenseSlot("head.hidden3", hidden, hidden),
            DenseSlot("head.out3", hidden, 3),
        )
    else:
        slots = (shared, DenseSlot("head.out3", hidden, 3), DenseSlot("head.out10", hidden + 3, 10))
    return HeadSpec(strategy, slots)


@dataclass(slots=True)
class HeadCache:
    spec: HeadSpec
    steps: dict[str, Any]
    detach: bool


def head_forward(
    spec: HeadSpec,
    tensors: dict[str, np.ndarray],
    z: np.ndarray,
    slope: float = LEAKY_SLOPE,
    detach: bool = False,
) -> tuple[np.ndarray, np.ndarray | None, HeadCache]:
    """Return (logits10, logits3 or None, cache); ``tensors`` maps '<slot>.weight'/'.bias'."""
    steps: dict[str, Any] = {}

    def dense(name: str, inputs: np.ndarray, act: bool) -> np.ndarray:
        out, steps[name] = linear(inputs, tensors[f"{name}.weight"], tensors[f"{name}.bias"])
        if act:
            out, steps[f"{name}.act"] = activation(out, "leaky_relu", slope)
        return out

    shared = dense("head.shared", z, act=True)
    strategy = spec.strategy
    if strategy is Strategy.SINGLE_TASK:
        return dense("head.out10", shared, act=False), None, HeadCache(spec, steps, detach)
    if strategy is Strategy.CONVENTIONAL_MTL:
        logits10 = dense("head.out10", shared, act=False)
        logits3 = dense("head.out3", shared, act=False)
    elif strategy is Strategy.SEQUENTIAL_MTL:
        logits3 = dense("head.out3", shared, act=False)
        logits10 = dense("head.out10", np.concatenate([shared, logits3], axis=1), act=False)
    else:
        logits10 = dense("head.out10", dense("head.hidden10", shared, act=True), act=False)
        logits3 = dense("head.out3", dense("head.hidden3", shared, act=True), act=False)
    return logits10, logits3, HeadCache(spec, steps, detach)


def head_backward(
    dlogits10: np.ndarray, dlogits3: np.ndarray | None, cache: HeadCache
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Return (d trunk output, grads keyed '<slot>.weight'/'.bias')."""
    steps = cache.steps
    grads: dict[str, np.ndarray] = {}

    def dense_back(name: str, dout: np.ndarray) -> np.ndarray:
        if f"{name}.act" in steps:
            dout = activation_backward(dout, steps[f"{name}.act"])
        dx, grads[f"{name}.weight"], grads[f"{name}.bias"] = linear_backward(dout, steps[name])
        return dx

    strategy = cache.spec.strategy
    if strategy is Strategy.SINGLE_TASK:
        dshared = dense_back("head.out10", dlogits10)
    elif strategy is Strategy.CONVENTIONAL_MTL:
        dshared = dense_back("head.out10", dlogits10) + dense_back("head.out3", dlogits3)
    elif strategy is Strategy.SEQUENTIAL_MTL:
        dcat = dense_back("head.out10", dlogits10)
        width = dcat.shape[1] - 3
        dlogits3_total = dlogits3 if cache.detach else dlogits3 + dcat[:, width:]
        dshared = dcat[:, :width] + dense_back("head.out3", dlogits3_total)
    else:
        dshared = dense_back("head.hidden10", dense_back("head.out10", dlogits10))
        dshared = dshared + dense_back("head.hidden3", dense_back("head.out3", dlogits3))
    return dense_back("head.shared", dshared), grads


# ------------------------------------------------------------------------ losses


@dataclass(slots=True)
class MtlLoss:
    loss: float
    ce3: float
    ce10: float
    grad10: np.ndarray
    grad3: np.ndarray


def mtl_loss(
    logits10: np.ndarray,
    logits3: np.ndarray,
    target10: np.ndarray,
    target3: np.ndarray,
    w: LossWeights,
) -> MtlLoss:
    """loss = w3 * CE3 + w10 * CE10 with gradients scaled by the same weights."""
    if w.w3 == 0 and w.w10 == 0:
        raise ValidationError("loss weights must not both be zero")
    ce10, g10 = softmax_cross_entropy(logits10, target10)
    ce3, g3 = softmax_cross_entropy(logits3, target3)
    return MtlLoss(
        loss=w.w3 * ce3 + w.w10 * ce10,
        ce3=ce3,
        ce10=ce10,
        grad10=w.w10 * g10,
        grad3=w.w3 * g3,
    )


GRADNORM_ALPHA = 1.5
GRADNORM_LR = 0.025
GRADNORM_FLOOR = 1e-4


def gradnorm_update(
    w: LossWeights,
    losses_now: tuple[float, float],
    losses_initial: tuple[float, float],
    grad_norms: tuple[float, float],
    alpha: float = GRADNORM_ALPHA,
    lr_w: float = GRADNORM_LR,
) -> LossWeights:
    """One GradNorm step on the (w3, w10) pair; every tuple is ordered (3-class, 10-class).

    ``grad_norms`` are norms of the unweighted task-loss gradients at the last
    shared layer, so the weighted norm of task i is ``w_i * grad_norms[i]``.
    """
    now = np.asarray(losses_now, dtype=float)
    initial = np.asarray(losses_initial, dtype=float)
    norms = np.asarray(grad_norms, dtype=float)
    if np.any(now <= 0) or np.any(initial <= 0) or np.any(norms <= 0):
        raise ValidationError("GradNorm losses and gradient norms must all be positive")

    weights = np.array([w.w3, w.w10])
    ratios = now / initial
    inverse_rates = ratios / ratios.mean()
    weighted_norms = weights * norms
    targets = weighted_norms.mean() * inverse_rates**alpha
    step = np.sign(weighted_norms - targets) * norms

    # elementwise ops and two-term sums only: relabeling the tasks swaps the result exactly
    stepped = np.maximum(weights - lr_w * step, GRADNORM_FLOOR)
    renormed = np.clip(2.0 * stepped / stepped.sum(), GRADNORM_FLOOR, 2.0 - GRADNORM_FLOOR)
    return LossWeights(w3=float(renormed[0]), w10=float(renormed[1]))


# ------------------------------------------------------------------------ fusion


def fuse_scores(
    p10: np.ndarray, p3: np.ndarray, beta: float
) -> tuple[np.ndarray, np.ndarray]:
    """Return the fused posterior and a mask of rows that fell back to ``p10``."""
    fused = p10 * p3[:, PARENT_INDEX] ** beta
    totals = fused.sum(axis=1, keepdims=True)
    fallback = totals[:, 0] <= 0
    safe = np.where(totals > 0, totals, 1.0)
    fused = np.where(fallback[:, None], p10, fused / safe)
    return fused, fallback


def joint_prediction(p10: np.ndarray, p3: np.ndarray, cfg: FusionConfig) -> np.ndarray:
    """fused(c) proportional to p10(c) * p3(parent_of(c)) ** beta, row-normalized."""
    check_row_stochastic(p10, "10-class posterior")
    check_row_stochastic(p3, "3-class posterior")
    if p10.shape[0] != p3.shape[0] or p10.shape[1] != len(SCENES) or p3.shape[1] != len(ABSTRACTS):
        raise ShapeError(f"posteriors must be [B, 10] and [B, 3], got {p10.shape}, {p3.shape}")
    if not cfg.enabled or cfg.beta == 0:
        return p10.copy()
    fused, fallback = fuse_scores(p10, p3, cfg.beta)
    if fallback.any():
        logger.warning("Score fusion fell back to the 10-class posterior for %s row(s)", int(fallback.sum()))
    return fused


# ---------------------------------------------------------------------- pretrain


@dataclass(frozen=True, slots=True)
class PretrainPlan:
    phase1_epochs: int
    phase2_epochs: int
    phase1_weights: LossWeights = LossWeights(1.0, 0.0)
    phase2_weights: LossWeights = LossWeights(0.0, 1.0)

    def phase_of(self, epoch: int) -> int:
        return 1 if epoch < self.phase1_epochs else 2

    def schedule_epoch(self, epoch: int) -> int:
        """Epoch index for the learning-rate schedule, which restarts with phase 2."""
        return epoch if epoch < self.phase1_epochs else epoch - self.phase1_epochs


PRETRAIN_SPLIT = 0.25


def pretrain_schedule(total_epochs: int, split: float = PRETRAIN_SPLIT) -> PretrainPlan:
    if not 0.0 < split < 1.0:
        raise ValidationError(f"pretrain split must lie strictly between 0 and 1, got {split}")
    phase1 = int(round(split * total_epochs))
    if phase1 < 1 or phase1 >= total_epochs:
        raise ValidationError(
            f"pretrain split {split} of {total_epochs} epochs leaves an empty phase"
        )
    return PretrainPlan(phase1_epochs=phase1, phase2_epochs=total_epochs - phase1)


def begin_finetune_phase(graph: "ModelGraph", rng: np.random.Generator) -> None:
    """Reinitialize the 10-class head and its momentum; all other params carry over."""
    graph.reinit_slots(TASK10_SLOTS, rng)
    logger.info("Pretrain phase 2: 10-class head reinitialized")
