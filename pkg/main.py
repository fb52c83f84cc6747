"""Command-line entry point: gradcheck, train, eval, featmap, params and synth-data.

Exit codes: 0 on success, 1 for usage and validation errors (including a
refusal to overwrite without ``--force``), 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from core.checkpoint import load_checkpoint
from core.config import settings
from core.errors import AmfmError, ShapeError, ValidationError
from core.featmap import export_taps
from core.frontend import load_manifest, load_wav, melspectrogram, scene_templates, synth_dataset, write_synthetic
from core.gradcheck import run_suite
from core.multitask import ABSTRACTS, SCENES, FusionConfig, SceneLabel, Strategy
from core.network import ModelGraph, count_params
from core.runconfig import emit_train_config, load_train_config, with_seed_override
from core.trainer import evaluate, train
from core.utils import atomic_write_text, guard_overwrite, logger

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _default_seed() -> int:
    return settings.seed_override if settings.seed_override is not None else 0


def _synthetic_sets(cfg, n_per_class: int) -> tuple[list, list]:
    synth = cfg.synth
    train_set = synth_dataset(n_per_class, synth.noise_level, cfg.seed, synth.n_frames, synth.n_mels)
    val_set = synth_dataset(max(1, n_per_class // 4), synth.noise_level, cfg.seed, synth.n_frames, synth.n_mels, split=1)
    return train_set, val_set


# ----------------------------------------------------------------------- commands


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_suite(tolerance=args.tolerance, seed=args.seed)
    print(f"{'case':<28} {'max_rel_error':>14} {'tolerance':>10}  status")
    for result in results:
        status = "ok" if result.passed else "FAIL"
        print(f"{result.name:<28} {result.max_error:>14.3e} {result.tolerance:>10.1e}  {status}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} passed")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def cmd_train(args: argparse.Namespace) -> int:
    cfg = with_seed_override(load_train_config(args.config))
    out_dir = Path(args.out or settings.runs_dir)
    if args.synthetic is not None:
        dataset, valset = _synthetic_sets(cfg, args.synthetic)
    else:
        dataset = load_manifest(args.data, cfg.mel, args.threads)
        valset = load_manifest(args.val, cfg.mel, args.threads) if args.val else None
    resume = load_checkpoint(args.resume) if args.resume else None

    config_path = guard_overwrite(out_dir / "config.toml", args.force or resume is not None)
    result = train(cfg, dataset, valset, out_dir=out_dir, resume=resume, force=args.force)
    atomic_write_text(config_path, emit_train_config(cfg))

    last = result.metrics.records[-1] if len(result.metrics) else None
    if last is not None:
        print(f"epochs={last.epoch + 1} train_acc10={last.train_acc10:.4f} train_acc3={last.train_acc3:.4f}")
    print(f"checkpoints written to {out_dir}")
    return EXIT_OK


def _confusion_frame(matrix: np.ndarray, names: Sequence[str]) -> pd.DataFrame:
    return pd.DataFrame(matrix, index=list(names), columns=list(names))


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    if args.synthetic is not None:
        synth = cfg.synth
        dataset = synth_dataset(args.synthetic, synth.noise_level, cfg.seed, synth.n_frames, synth.n_mels, split=1)
    else:
        dataset = load_manifest(args.data, cfg.mel, args.threads)
    fusion = FusionConfig(enabled=True, beta=args.fusion_beta) if args.fusion_beta is not None else cfg.fusion
    report = evaluate(ckpt, dataset, fusion, strategy=args.strategy)

    scenes = _confusion_frame(report.confusion10, [s.value for s in SCENES])
    abstracts = _confusion_frame(report.confusion3, [a.value for a in ABSTRACTS])
    print(f"acc10={report.acc10:.4f}")
    print(f"acc3={report.acc3:.4f}")
    print(scenes.to_string())
    print(abstracts.to_string())

    out_dir = Path(args.out) if args.out else Path(args.ckpt).parent
    targets = [guard_overwrite(out_dir / name, args.force) for name in ("confusion10.csv", "confusion3.csv", "accuracy.csv")]
    atomic_write_text(targets[0], scenes.to_csv())
    atomic_write_text(targets[1], abstracts.to_csv())
    summary = pd.DataFrame([{"acc10": report.acc10, "acc3": report.acc3, "n": report.n_examples}])
    atomic_write_text(targets[2], summary.to_csv(index=False))
    return EXIT_OK


def cmd_featmap(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    if args.input:
        features = melspectrogram(load_wav(args.input), cfg.mel)
    else:
        try:
            scene = SceneLabel(args.synthetic_class)
        except ValueError as exc:
            raise ValidationError(f"unknown scene class {args.synthetic_class!r}") from exc
        templates = scene_templates(cfg.seed, cfg.synth.n_frames, cfg.synth.n_mels)
        features = templates[scene.code][None, None, :, :]
    export = export_taps(ckpt.build_graph(), features, args.block, args.out, force=args.force)
    print(f"wrote {len(export.csv_paths)} CSV grids and {len(export.pgm_paths)} PGM images to {args.out}")
    return EXIT_OK


def cmd_params(args: argparse.Namespace) -> int:
    cfg = load_train_config(args.config)
    graph = ModelGraph(cfg.architecture, args.strategy or cfg.strategy, np.random.default_rng(cfg.seed))
    print(count_params(graph))
    for slot, size in graph.slot_breakdown().items():
        print(f"{slot}\t{size}")
    return EXIT_OK


def cmd_synth_data(args: argparse.Namespace) -> int:
    dataset = synth_dataset(args.n, args.noise, args.seed, args.frames, args.mels)
    manifest = write_synthetic(dataset, args.out, force=args.force)
    print(f"wrote {len(dataset)} clips and {manifest}")
    return EXIT_OK


# ------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amfm", description="Attentive max feature map acoustic scene classifier")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    strategies = [s.value for s in Strategy]

    p = commands.add_parser("gradcheck", help="verify every backward pass against finite differences")
    p.add_argument("--tolerance", type=float, default=None, help="override every per-case relative error bound")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(handler=cmd_gradcheck)

    p = commands.add_parser("train", help="train a model and write checkpoints plus metrics")
    p.add_argument("--config", required=True, help="TOML run config, or 'default'")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", help="manifest CSV with path,scene_label columns")
    source.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic clips per scene class")
    p.add_argument("--val", help="validation manifest (with --data)")
    p.add_argument("--out", help="output directory (default: $AMFM_RUNS_DIR)")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--threads", type=int, default=1, help="feature-extraction threads")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("eval", help="accuracy and confusion matrices of a checkpoint")
    p.add_argument("--ckpt", required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", help="manifest CSV with path,scene_label columns")
    source.add_argument("--synthetic", type=int, metavar="N", help="evaluate on N synthetic clips per class")
    p.add_argument("--fusion-beta", type=float, default=None, help="enable score fusion with this exponent")
    p.add_argument("--strategy", choices=strategies, default=None, help="head layout to evaluate with")
    p.add_argument("--out", help="directory for the CSV outputs (default: next to the checkpoint)")
    p.add_argument("--threads", type=int, default=1, help="feature-extraction threads")
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("featmap", help="export attention taps of one block as CSV and PGM")
    p.add_argument("--ckpt", required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", help="44.1 kHz WAV file")
    source.add_argument("--synthetic-class", help="scene class whose synthetic template is used")
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_featmap)

    p = commands.add_parser("params", help="trainable parameter count with a per-slot breakdown")
    p.add_argument("--config", required=True, help="TOML run config, or 'default'")
    p.add_argument("--strategy", choices=strategies, default=None)
    p.set_defaults(handler=cmd_params)

    p = commands.add_parser("synth-data", help="write the synthetic dataset and its manifest")
    p.add_argument("--n", type=int, required=True, help="clips per scene class")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--mels", type=int, default=32)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_synth_data)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    try:
        return args.handler(args)
    except (ValidationError, ShapeError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (AmfmError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(run())
