"""Typed domain models shared across the numeric core, frontend and trainer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from core.errors import ShapeError


def as_feature_map(x: np.ndarray, what: str = "feature map") -> np.ndarray:
    """Check the [B, C, T, F] layout every block operates on."""
    if x.ndim != 4:
        raise ShapeError(f"{what} must have rank 4 [B, C, T, F], got shape {x.shape}")
    return x


@dataclass(slots=True)
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    velocity: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.velocity is None:
            self.velocity = np.zeros_like(self.value)
        if not (self.value.shape == self.grad.shape == self.velocity.shape):
            raise ShapeError(f"param {self.name}: value/grad/velocity shapes differ")

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass(slots=True)
class BatchNormStats:
    """Running statistics; ``None`` means the stats were never populated."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormStats":
        return cls(mean=np.zeros(channels), var=np.ones(channels))

    @property
    def populated(self) -> bool:
        return self.mean is not None and self.var is not None


@dataclass(slots=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / float(self.sample_rate)


@dataclass(slots=True)
class BlockTaps:
    a: np.ndarray  # MFM output after batchnorm, before attention
    b: np.ndarray  # CBAM(a)
    c: np.ndarray  # max(a, b)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"a": self.a, "b": self.b, "c": self.c}
