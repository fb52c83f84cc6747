"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    b"AMFM"  u32 version
    u32 len  run config as canonical TOML (utf-8)
    u32 len  metadata as canonical JSON (epoch, RNG state, loss weights, ...)
    u32 n    shape table: n x (u16 name len, name, u8 rank, rank x u32 extent)
    raw float64 values of every tensor, in shape-table order

Saving the result of a load reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from core.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from core.multitask import LossWeights, Strategy
from core.network import ModelGraph
from core.runconfig import TrainConfig, emit_train_config, parse_train_config
from core.utils import atomic_write_bytes, guard_overwrite, logger

MAGIC = b"AMFM"
FORMAT_VERSION = 1
MAX_RANK = 8
_DTYPE = np.dtype("<f8")


@dataclass(slots=True)
class Checkpoint:
    config: TrainConfig
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    rng_state: dict[str, Any] = field(default_factory=dict)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    gradnorm_initial: tuple[float, float] | None = None
    best_val_acc10: float | None = None
    version: int = FORMAT_VERSION

    @classmethod
    def capture(
        cls,
        graph: ModelGraph,
        config: TrainConfig,
        epoch: int,
        rng: np.random.Generator,
        loss_weights: LossWeights,
        gradnorm_initial: tuple[float, float] | None = None,
        best_val_acc10: float | None = None,
    ) -> "Checkpoint":
        return cls(
            config=config,
            tensors=graph.tensor_table(),
            epoch=epoch,
            rng_state=rng.bit_generator.state,
            loss_weights=loss_weights,
            gradnorm_initial=gradnorm_initial,
            best_val_acc10=best_val_acc10,
        )

    def meta(self) -> dict[str, Any]:
        return {
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "loss_weights": [self.loss_weights.w3, self.loss_weights.w10],
            "gradnorm_initial": list(self.gradnorm_initial) if self.gradnorm_initial else None,
            "best_val_acc10": self.best_val_acc10,
        }

    def restore_rng(self) -> np.random.Generator:
        rng = np.random.default_rng(self.config.seed)
        if self.rng_state:
            rng.bit_generator.state = self.rng_state
        return rng

    def build_graph(self, strategy: Strategy | str | None = None) -> ModelGraph:
        """Rebuild the network; a different ``strategy`` loads the shared slots and warns about the rest."""
        graph = ModelGraph(
            self.config.architecture,
            strategy or self.config.strategy,
            np.random.default_rng(self.config.seed),
        )
        graph.load_tensor_table(self.tensors)
        return graph


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    config = emit_train_config(ckpt.config).encode("utf-8")
    meta = json.dumps(ckpt.meta(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", ckpt.version)]
    parts += [struct.pack("<I", len(config)), config, struct.pack("<I", len(meta)), meta]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, tensor in ckpt.tensors.items():
        encoded = name.encode("utf-8")
        if tensor.ndim > MAX_RANK:
            raise CheckpointShapeError(f"tensor {name} has rank {tensor.ndim} > {MAX_RANK}")
        parts += [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", tensor.ndim)]
        parts += [struct.pack(f"<{tensor.ndim}I", *tensor.shape)]
    parts += [np.ascontiguousarray(tensor, dtype=_DTYPE).tobytes() for tensor in ckpt.tensors.values()]
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes) -> None:
        self.payload = payload
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.payload):
            raise CheckpointTruncatedError(
                f"checkpoint truncated while reading {what} (need {end} bytes, have {len(self.payload)})"
            )
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(payload: bytes) -> Checkpoint:
    reader = _Reader(payload)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    (version,) = reader.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")

    (config_len,) = reader.unpack("<I", "config length")
    config_raw = reader.take(config_len, "config")
    (meta_len,) = reader.unpack("<I", "metadata length")
    meta_raw = reader.take(meta_len, "metadata")

    (count,) = reader.unpack("<I", "tensor count")
    table: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "tensor name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        (rank,) = reader.unpack("<B", f"rank of {name}")
        if rank > MAX_RANK:
            raise CheckpointShapeError(f"tensor {name} declares rank {rank} > {MAX_RANK}")
        table.append((name, reader.unpack(f"<{rank}I", f"extents of {name}")))
    if len({name for name, _ in table}) != len(table):
        raise CheckpointShapeError("shape table repeats a tensor name")

    tensors: dict[str, np.ndarray] = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        raw = reader.take(size, f"values of {name}")
        tensors[name] = np.frombuffer(raw, dtype=_DTYPE).reshape(shape).astype(np.float64)
    if reader.offset != len(payload):
        raise CheckpointShapeError(
            f"{len(payload) - reader.offset} trailing byte(s) after the tensors named in the shape table"
        )

    try:
        config = parse_train_config(config_raw.decode("utf-8"))
        meta = json.loads(meta_raw.decode("utf-8"))
        weights = LossWeights(*meta["loss_weights"])
        epoch = int(meta["epoch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint metadata is invalid: {exc}") from exc
    initial = meta.get("gradnorm_initial")
    return Checkpoint(
        config=config,
        tensors=tensors,
        epoch=epoch,
        rng_state=meta.get("rng_state") or {},
        loss_weights=weights,
        gradnorm_initial=tuple(initial) if initial else None,
        best_val_acc10=meta.get("best_val_acc10"),
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path, force: bool = True) -> Path:
    target = guard_overwrite(path, force)
    atomic_write_bytes(target, encode_checkpoint(ckpt))
    logger.debug("Saved checkpoint epoch=%s to %s", ckpt.epoch, target)
    return target


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
