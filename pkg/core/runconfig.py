"""Run configuration: ``TrainConfig`` and its TOML reader and canonical writer.

A run file has a ``[train]`` table for the scalar settings and one table per
nested section::

    [train]
    strategy = "extended_mtl"
    epochs = 300

    [loss_weights]
    ratio = "1:5"

    [architecture]
    widths = [16, 32]

Omitted keys keep their defaults, unknown keys are rejected, and the literal
path ``default`` stands for the built-in configuration.
"""
from __future__ import annotations

import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from core.config import settings
from core.errors import ValidationError
from core.frontend import AugmentPolicy, MelConfig, SynthConfig
from core.multitask import (
    DEFAULT_STRATEGY,
    PRETRAIN_SPLIT,
    RATIO_PRESETS,
    FusionConfig,
    LossWeights,
    Strategy,
    parse_strategy,
)
from core.network import ArchitectureConfig
from core.utils import logger

DEFAULT_CONFIG = "default"


@dataclass(frozen=True, slots=True)
class TrainConfig:
    strategy: Strategy = DEFAULT_STRATEGY
    lr_max: float = 0.001
    lr_min: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 24
    epochs: int = 800
    restart_period: int = 100
    restart_mult: float = 1.0
    seed: int = 0
    gradnorm_enabled: bool = False
    pretrain_split: float = PRETRAIN_SPLIT
    loss_weights: LossWeights = field(default_factory=LossWeights)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", parse_strategy(self.strategy))
        if not 0.0 <= self.lr_min < self.lr_max:
            raise ValidationError(f"need 0 <= lr_min < lr_max, got {self.lr_min} and {self.lr_max}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1 or self.restart_period < 1:
            raise ValidationError("batch_size, epochs and restart_period must be >= 1")
        if self.restart_mult < 1.0:
            raise ValidationError(f"restart_mult must be >= 1, got {self.restart_mult}")


SECTIONS: dict[str, type] = {
    "loss_weights": LossWeights,
    "fusion": FusionConfig,
    "augment": AugmentPolicy,
    "architecture": ArchitectureConfig,
    "mel": MelConfig,
    "synth": SynthConfig,
}
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name not in SECTIONS)


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"[{section}] {key}"
    if isinstance(default, Strategy):
        return parse_strategy(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ValidationError(f"{where} must be a list of integers, got {value!r}")
        return tuple(value)
    if not isinstance(value, type(default)):
        raise ValidationError(f"{where} must be a {type(default).__name__}, got {value!r}")
    return value


def _build(cls: type, section: str, raw: dict[str, Any]) -> Any:
    defaults = cls()
    names = [f.name for f in fields(cls)]
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ValidationError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    values = {key: _coerce(section, key, value, getattr(defaults, key)) for key, value in raw.items()}
    return cls(**values)


def _loss_weights(raw: dict[str, Any]) -> LossWeights:
    if "ratio" not in raw:
        return _build(LossWeights, "loss_weights", raw)
    if set(raw) != {"ratio"}:
        raise ValidationError("[loss_weights] takes either ratio or w3/w10, not both")
    ratio = raw["ratio"]
    if ratio not in RATIO_PRESETS:
        raise ValidationError(f"unknown loss ratio {ratio!r}; presets are {sorted(RATIO_PRESETS)}")
    return RATIO_PRESETS[ratio]


def parse_train_config(text: str) -> TrainConfig:
    try:
        document = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"run config is not valid TOML: {exc}") from exc

    unknown = sorted(set(document) - {"train", *SECTIONS})
    if unknown:
        raise ValidationError(f"unknown section(s) in run config: {', '.join(unknown)}")
    for name, table in document.items():
        if not isinstance(table, dict):
            raise ValidationError(f"[{name}] must be a table")

    train_raw = document.get("train", {})
    unknown = sorted(set(train_raw) - set(TRAIN_KEYS))
    if unknown:
        raise ValidationError(f"unknown key(s) in [train]: {', '.join(unknown)}")
    defaults = TrainConfig()
    values: dict[str, Any] = {
        key: _coerce("train", key, value, getattr(defaults, key)) for key, value in train_raw.items()
    }
    for name, cls in SECTIONS.items():
        if name not in document:
            continue
        raw = document[name]
        values[name] = _loss_weights(raw) if name == "loss_weights" else _build(cls, name, raw)
    return TrainConfig(**values)


def load_train_config(path: str | Path) -> TrainConfig:
    if str(path) == DEFAULT_CONFIG:
        return TrainConfig()
    return parse_train_config(Path(path).read_text(encoding="utf-8"))


def _format(value: Any) -> str:
    if isinstance(value, Strategy):
        return json.dumps(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, tuple):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    return json.dumps(value)


def emit_train_config(cfg: TrainConfig) -> str:
    """Canonical TOML: fixed section and key order, ``repr`` floats."""
    lines = ["[train]"]
    lines += [f"{key} = {_format(getattr(cfg, key))}" for key in TRAIN_KEYS]
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines += ["", f"[{name}]"]
        lines += [f"{f.name} = {_format(getattr(section, f.name))}" for f in fields(section)]
    return "\n".join(lines) + "\n"


def with_seed_override(cfg: TrainConfig) -> TrainConfig:
    if settings.seed_override is None or settings.seed_override == cfg.seed:
        return cfg
    logger.info("AMFM_SEED overrides the configured seed %s -> %s", cfg.seed, settings.seed_override)
    return replace(cfg, seed=settings.seed_override)
