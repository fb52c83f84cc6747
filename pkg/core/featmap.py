"""Export of AMFM block taps: before attention (a), attended (b) and block output (c).

Each channel is written as a CSV grid (T rows by F columns, ``%.17g`` so values
re-read exactly) and as an 8-bit binary PGM min-max normalized per channel.
The per-channel minimum and maximum go to ``scales_<block>.txt``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from core.amfm import BlockKind
from core.errors import ValidationError
from core.models import as_feature_map
from core.network import ModelGraph
from core.utils import atomic_write_bytes, atomic_write_text, guard_overwrite, logger

TAGS = ("a", "b", "c")


@dataclass(slots=True)
class FeatmapExport:
    block: int
    channels: int
    csv_paths: list[Path] = field(default_factory=list)
    pgm_paths: list[Path] = field(default_factory=list)
    scales_path: Path | None = None


def to_pgm(grid: np.ndarray) -> tuple[bytes, float, float]:
    """Binary P5 image of a 2-D grid; returns (payload, min, max)."""
    low, high = float(grid.min()), float(grid.max())
    span = high - low
    scaled = np.zeros(grid.shape) if span == 0 else (grid - low) / span
    pixels = np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    return header + pixels.tobytes(), low, high


def _csv(grid: np.ndarray) -> str:
    buffer = io.StringIO()
    np.savetxt(buffer, grid, fmt="%.17g", delimiter=",")
    return buffer.getvalue()


def export_taps(
    graph: ModelGraph, x: np.ndarray, block: int, out_dir: str | Path, force: bool = False
) -> FeatmapExport:
    """Run ``x`` (first example only) through the graph and dump the taps of ``block``."""
    if graph.arch.kind is not BlockKind.AMFM:
        raise ValidationError(f"block kind {graph.arch.block_kind} has no attention taps to export")
    if not 0 <= block < graph.n_blocks:
        raise ValidationError(f"block {block} out of range; the network has {graph.n_blocks} blocks")
    x = as_feature_map(x, "featmap input")[:1]
    taps = graph.forward(x, mode="infer", keep_taps=True).taps[block]

    out_dir = Path(out_dir)
    channels = taps.a.shape[1]
    targets = [out_dir / f"scales_{block}.txt"]
    targets += [out_dir / f"{t}_{block}_{c}.{ext}" for t in TAGS for c in range(channels) for ext in ("csv", "pgm")]
    for target in targets:
        guard_overwrite(target, force)

    export = FeatmapExport(block=block, channels=channels)
    scale_lines = ["tag,block,channel,min,max"]
    for tag, tensor in taps.as_dict().items():
        for channel in range(tensor.shape[1]):
            grid = tensor[0, channel]
            stem = f"{tag}_{block}_{channel}"
            export.csv_paths.append(atomic_write_text(out_dir / f"{stem}.csv", _csv(grid)))
            image, low, high = to_pgm(grid)
            export.pgm_paths.append(atomic_write_bytes(out_dir / f"{stem}.pgm", image))
            scale_lines.append(f"{tag},{block},{channel},{low!r},{high!r}")
    export.scales_path = atomic_write_text(targets[0], "\n".join(scale_lines) + "\n")
    logger.info("Exported %s tap channels of block %s to %s", export.channels, block, out_dir)
    return export
