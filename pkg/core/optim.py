"""SGD with momentum and the cosine warm-restart learning-rate schedule."""
from __future__ import annotations

import math
from typing import TYPE_CHECKING, Iterable

import numpy as np

from core.errors import NumericError, ValidationError
from core.models import Param

if TYPE_CHECKING:
    from core.runconfig import TrainConfig


def sgd_step(params: Iterable[Param], lr: float, momentum: float) -> None:
    """v <- momentum * v + grad; value <- value - lr * v; grads are zeroed afterwards.

    Every gradient is checked before any value moves, so a non-finite gradient
    leaves the whole parameter set untouched.
    """
    params = list(params)
    for param in params:
        if not np.all(np.isfinite(param.grad)):
            raise NumericError(f"non-finite gradient in {param.name}", where=param.name)
    for param in params:
        param.velocity *= momentum
        param.velocity += param.grad
        param.value -= lr * param.velocity
        param.zero_grad()


def restart_position(epoch: int, period: int, mult: float) -> tuple[float, float]:
    """Return (epochs since the last restart, length of the current period)."""
    if epoch < 0:
        raise ValidationError(f"epoch must be non-negative, got {epoch}")
    if mult == 1:
        return float(epoch % period), float(period)
    t_cur, t_i = float(epoch), float(period)
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= mult
    return t_cur, t_i


def warm_restart_lr(epoch: int, cfg: "TrainConfig") -> float:
    t_cur, t_i = restart_position(epoch, cfg.restart_period, cfg.restart_mult)
    if t_cur == 0:
        return cfg.lr_max
    lr = cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t_cur / t_i)) / 2.0
    return min(max(lr, cfg.lr_min), cfg.lr_max)
