"""Epoch loop for every strategy, evaluation and the per-epoch metrics log."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, confusion_matrix

from core.checkpoint import Checkpoint, save_checkpoint
from core.errors import DivergenceError, NumericError, ShapeError, ValidationError
from core.frontend import Sample, mixup_batch, spec_augment, stack_dataset
from core.multitask import (
    ABSTRACTS,
    PARENT_INDEX,
    SCENES,
    FusionConfig,
    LabelPair,
    Strategy,
    begin_finetune_phase,
    gradnorm_update,
    joint_prediction,
    marginalize,
    mtl_loss,
    pretrain_schedule,
)
from core.network import ModelGraph
from core.nn import softmax, softmax_cross_entropy
from core.optim import sgd_step, warm_restart_lr
from core.runconfig import TrainConfig
from core.utils import atomic_write_text, guard_overwrite, logger

EVAL_BATCH = 64
FINAL_CKPT = "final.ckpt"
BEST_CKPT = "best.ckpt"
METRICS_CSV = "metrics.csv"


@dataclass(slots=True)
class EpochRecord:
    epoch: int
    lr: float
    loss3: float
    loss10: float
    train_acc3: float
    train_acc10: float
    val_acc3: float
    val_acc10: float
    w3: float
    w10: float


METRICS_COLUMNS = tuple(f.name for f in fields(EpochRecord))


@dataclass(slots=True)
class MetricsLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValidationError(
                f"metrics log is append-only; epoch {record.epoch} follows {self.records[-1].epoch}"
            )
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=list(METRICS_COLUMNS))

    def write_csv(self, path: str | Path) -> Path:
        return atomic_write_text(path, self.to_frame().to_csv(index=False))

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricsLog":
        frame = pd.read_csv(path)
        if tuple(frame.columns) != METRICS_COLUMNS:
            raise ValidationError(f"{path}: unexpected metrics header {list(frame.columns)}")
        log = cls()
        for row in frame.itertuples(index=False):
            log.append(EpochRecord(int(row.epoch), *(float(v) for v in row[1:])))
        return log


@dataclass(slots=True)
class EvalReport:
    acc10: float
    acc3: float
    confusion10: np.ndarray
    confusion3: np.ndarray

    @property
    def n_examples(self) -> int:
        return int(self.confusion10.sum())


@dataclass(slots=True)
class TrainResult:
    final: Checkpoint
    best: Checkpoint | None
    metrics: MetricsLog


# --------------------------------------------------------------------- evaluation


def score_predictions(
    pred10: np.ndarray, true10: np.ndarray, pred3: np.ndarray, true3: np.ndarray
) -> EvalReport:
    if len(true10) == 0:
        raise ValidationError("cannot score an empty set of predictions")
    if not (len(pred10) == len(true10) == len(pred3) == len(true3)):
        raise ShapeError("prediction and label counts differ")
    return EvalReport(
        acc10=float(accuracy_score(true10, pred10)),
        acc3=float(accuracy_score(true3, pred3)),
        confusion10=confusion_matrix(true10, pred10, labels=list(range(len(SCENES)))),
        confusion3=confusion_matrix(true3, pred3, labels=list(range(len(ABSTRACTS)))),
    )


def predict(
    graph: ModelGraph, x: np.ndarray, fusion: FusionConfig | None = None, batch_size: int = EVAL_BATCH
) -> tuple[np.ndarray, np.ndarray]:
    """Posteriors (p10, p3) in inference mode; single-task heads derive p3 by marginalizing p10."""
    p10_parts, p3_parts = [], []
    for start in range(0, x.shape[0], batch_size):
        fp = graph.forward(x[start : start + batch_size], mode="infer")
        p10_parts.append(softmax(fp.logits10))
        p3_parts.append(softmax(fp.logits3) if fp.logits3 is not None else None)
    p10 = np.concatenate(p10_parts)
    if not graph.strategy.emits_abstract:
        if fusion is not None and fusion.enabled:
            logger.warning("Score fusion needs a 3-class head; ignored for %s", graph.strategy.value)
        return p10, marginalize(p10)
    p3 = np.concatenate(p3_parts)
    if fusion is not None:
        p10 = joint_prediction(p10, p3, fusion)
    return p10, p3


def evaluate_arrays(
    graph: ModelGraph, x: np.ndarray, labels: LabelPair, fusion: FusionConfig | None = None
) -> EvalReport:
    p10, p3 = predict(graph, x, fusion)
    pred10 = p10.argmax(axis=1)
    pred3 = p3.argmax(axis=1) if graph.strategy.emits_abstract else PARENT_INDEX[pred10]
    return score_predictions(pred10, labels.scene.argmax(axis=1), pred3, labels.abstract.argmax(axis=1))


def evaluate_model(
    graph: ModelGraph, dataset: Sequence[Sample], fusion: FusionConfig | None = None
) -> EvalReport:
    if not dataset:
        raise ValidationError("cannot evaluate on an empty dataset")
    x, labels = stack_dataset(dataset)
    return evaluate_arrays(graph, x, labels, fusion)


def evaluate(
    ckpt: Checkpoint,
    dataset: Sequence[Sample],
    fusion: FusionConfig | None = None,
    strategy: Strategy | str | None = None,
) -> EvalReport:
    return evaluate_model(ckpt.build_graph(strategy), dataset, fusion)


# ----------------------------------------------------------------------- training


@dataclass(slots=True)
class _EpochTotals:
    n: int = 0
    ce3: float = 0.0
    ce10: float = 0.0

    def add(self, size: int, ce3: float, ce10: float) -> None:
        self.n += size
        self.ce3 += size * ce3
        self.ce10 += size * ce10

    def means(self) -> tuple[float, float]:
        return self.ce3 / self.n, self.ce10 / self.n


def _subset(labels: LabelPair, index: np.ndarray) -> LabelPair:
    return LabelPair(scene=labels.scene[index], abstract=labels.abstract[index])


def _prepare_output(out_dir: Path | None, force: bool) -> None:
    if out_dir is None:
        return
    for name in (FINAL_CKPT, BEST_CKPT, METRICS_CSV):
        guard_overwrite(out_dir / name, force)


def train(
    config: TrainConfig,
    dataset: Sequence[Sample],
    valset: Sequence[Sample] | None = None,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    force: bool = False,
) -> TrainResult:
    """Run the epoch loop; deterministic for a fixed config, dataset and seed."""
    if not dataset:
        raise ValidationError("training dataset is empty")
    x, labels = stack_dataset(dataset)
    val = stack_dataset(valset) if valset else None
    out_dir = Path(out_dir) if out_dir is not None else None
    _prepare_output(out_dir, force or resume is not None)

    strategy = config.strategy
    multitask = strategy.emits_abstract
    use_gradnorm = config.gradnorm_enabled and multitask and strategy is not Strategy.PRETRAIN
    if config.gradnorm_enabled and not use_gradnorm:
        logger.warning("GradNorm ignored for strategy %s", strategy.value)
    plan = pretrain_schedule(config.epochs, config.pretrain_split) if strategy is Strategy.PRETRAIN else None

    if resume is not None:
        if resume.config.architecture != config.architecture or resume.config.strategy is not strategy:
            raise ValidationError("resume checkpoint was trained with a different architecture or strategy")
        rng = resume.restore_rng()
        graph = resume.build_graph()
        start, weights = resume.epoch, resume.loss_weights
        initial, best_acc = resume.gradnorm_initial, resume.best_val_acc10
        logger.info("Resuming %s at epoch %s", strategy.value, start)
    else:
        rng = np.random.default_rng(config.seed)
        graph = ModelGraph(config.architecture, strategy, rng)
        start = 0
        weights = plan.phase1_weights if plan else config.loss_weights
        initial, best_acc = None, None

    metrics = MetricsLog()
    if resume is not None and out_dir is not None and (out_dir / METRICS_CSV).exists():
        metrics = MetricsLog.read_csv(out_dir / METRICS_CSV)
        metrics.records = [r for r in metrics.records if r.epoch < start]
    last_good = Checkpoint.capture(graph, config, start, rng, weights, initial, best_acc)
    best: Checkpoint | None = None
    n = x.shape[0]

    for epoch in range(start, config.epochs):
        lr = warm_restart_lr(plan.schedule_epoch(epoch) if plan else epoch, config)
        if plan is not None:
            weights = plan.phase1_weights if plan.phase_of(epoch) == 1 else plan.phase2_weights
            if epoch == plan.phase1_epochs:
                begin_finetune_phase(graph, rng)

        totals = _EpochTotals()
        order = rng.permutation(n)
        norms: tuple[float, float] | None = None
        for offset in range(0, n, config.batch_size):
            index = order[offset : offset + config.batch_size]
            xb, yb = x[index], _subset(labels, index)
            if config.augment.mixup_enabled:
                xb, yb = mixup_batch(xb, yb, config.augment.mixup_alpha, rng)
            if config.augment.spec_augment_enabled:
                xb = spec_augment(xb, config.augment, rng)

            fp = graph.forward(xb, mode="train")
            if multitask:
                step = mtl_loss(fp.logits10, fp.logits3, yb.scene, yb.abstract, weights)
                batch_loss, ce3, ce10 = step.loss, step.ce3, step.ce10
                graph.backward(fp, step.grad10, step.grad3)
                if use_gradnorm and offset + config.batch_size >= n:
                    _, g10 = softmax_cross_entropy(fp.logits10, yb.scene)
                    _, g3 = softmax_cross_entropy(fp.logits3, yb.abstract)
                    norms = graph.shared_grad_norms(fp, g10, g3)
            else:
                ce10, g10 = softmax_cross_entropy(fp.logits10, yb.scene)
                batch_loss, ce3 = ce10, math.nan
                graph.backward(fp, g10)

            if not math.isfinite(batch_loss):
                logger.error("Loss diverged at epoch %s; keeping checkpoint from epoch %s", epoch, last_good.epoch)
                _write_metrics(out_dir, metrics)
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", checkpoint=last_good)
            try:
                sgd_step(graph.params.values(), lr, config.momentum)
            except NumericError as exc:
                logger.error("Gradient diverged at epoch %s in %s", epoch, exc.where)
                _write_metrics(out_dir, metrics)
                raise DivergenceError(str(exc), checkpoint=last_good, where=exc.where) from exc
            totals.add(index.shape[0], ce3, ce10)

        loss3, loss10 = totals.means()
        if use_gradnorm:
            if initial is None:
                initial = (loss3, loss10)
            if norms is not None and min(norms) > 0:
                weights = gradnorm_update(weights, (loss3, loss10), initial, norms)

        train_report = evaluate_arrays(graph, x, labels)
        val_report = evaluate_arrays(graph, *val, config.fusion) if val else None
        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            loss3=loss3,
            loss10=loss10,
            train_acc3=train_report.acc3,
            train_acc10=train_report.acc10,
            val_acc3=val_report.acc3 if val_report else math.nan,
            val_acc10=val_report.acc10 if val_report else math.nan,
            w3=weights.w3,
            w10=weights.w10,
        )
        metrics.append(record)
        logger.info(
            "epoch %s lr=%.6f loss3=%.4f loss10=%.4f acc3=%.3f acc10=%.3f val10=%.3f w=(%.3f, %.3f)",
            epoch, lr, loss3, loss10, record.train_acc3, record.train_acc10, record.val_acc10,
            weights.w3, weights.w10,
        )

        improved = val_report is not None and (best_acc is None or val_report.acc10 > best_acc)
        if improved:
            best_acc = val_report.acc10
        last_good = Checkpoint.capture(graph, config, epoch + 1, rng, weights, initial, best_acc)
        if improved:
            best = last_good
            if out_dir is not None:
                save_checkpoint(best, out_dir / BEST_CKPT)
        if out_dir is not None:
            save_checkpoint(last_good, out_dir / FINAL_CKPT)

    _write_metrics(out_dir, metrics)
    return TrainResult(final=last_good, best=best, metrics=metrics)


def _write_metrics(out_dir: Path | None, metrics: MetricsLog) -> None:
    if out_dir is not None:
        metrics.write_csv(out_dir / METRICS_CSV)
