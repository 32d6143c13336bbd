"""Training loop, evaluation and FM4 weight tuning."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .data import DatasetSplits, LabelSpace, NormStats, PatchSet
from .errors import ConfigurationError, DataError, DivergenceError, NonFiniteError
from .metrics import ConfusionMatrix, confusion_matrix
from .models import FusionNetwork, LateFusionNet
from .optim import adam_step
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    epochs: int = 100
    dropout_rate: float = 0.2
    loss: str = "categorical_crossentropy"
    batch_size: int = 32
    seed: int = 0
    early_stop_patience: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer.lower() != "adam":
            raise ConfigurationError(f"only the Adam optimizer is supported, got {self.optimizer!r}")
        if self.loss.lower().replace(" ", "_") not in ("categorical_crossentropy", "categorical_cross_entropy"):
            raise ConfigurationError(f"only categorical cross entropy is supported, got {self.loss!r}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigurationError("early_stop_patience must be >= 1 when set")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None
    seconds: float


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def column(self, name: str) -> list:
        return [getattr(e, name) for e in self.entries]

    def to_csv(self, path, include_seconds: bool = True) -> None:
        cols = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"] + (["seconds"] if include_seconds else [])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for e in self.entries:
                row = asdict(e)
                w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in cols])


# ---------------------------------------------------------------- helpers


def _arrays(patches: PatchSet, stats: NormStats | None) -> tuple[np.ndarray, np.ndarray]:
    if stats is None:
        return np.asarray(patches.sar, dtype=np.float32), np.asarray(patches.msi, dtype=np.float32)
    return stats.apply(np.asarray(patches.sar), np.asarray(patches.msi))


def _net_targets(net: FusionNetwork, labels: np.ndarray) -> np.ndarray:
    space = net.spec.label_space
    if labels.size and labels.max() >= space.source_classes:
        raise ConfigurationError(
            f"dataset labels reach {labels.max()} but the model's label space has {space.source_classes} source classes"
        )
    return space.map(labels)


def _batched_probs(net: FusionNetwork, sar: np.ndarray, msi: np.ndarray, batch_size: int) -> np.ndarray:
    out = []
    for lo in range(0, len(sar), batch_size):
        out.append(net.forward(sar[lo : lo + batch_size], msi[lo : lo + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, net.num_classes), dtype=np.float32)


def _snapshot(net: FusionNetwork) -> list[np.ndarray]:
    return [p.data.copy() for p in net.parameters()] + [b.copy() for _, b in net.named_buffers()]


def _restore(net: FusionNetwork, snap: list[np.ndarray]) -> None:
    targets = [p.data for p in net.parameters()] + [b for _, b in net.named_buffers()]
    for dst, src in zip(targets, snap):
        dst[...] = src


def _mean_ce(probs: np.ndarray, targets: np.ndarray) -> float:
    p = probs[np.arange(len(targets)), targets]
    return float(-np.log(np.maximum(p.astype(np.float64), ops.PROB_FLOOR)).mean())


# ---------------------------------------------------------------- training


def train(net: FusionNetwork, splits: DatasetSplits, config: TrainConfig = TrainConfig(), on_epoch=None):
    """Mini-batch Adam training; returns the best-validation network and its log.

    ``on_epoch(record)`` is called after every epoch; a truthy return stops training.
    """
    log = TrainLog()
    if config.epochs == 0:
        return net, log
    if len(splits.train) == 0:
        raise DataError("training split is empty")

    sar, msi = _arrays(splits.train, splits.stats)
    y = _net_targets(net, np.asarray(splits.train.labels))
    onehot = ops.one_hot(y, net.num_classes, dtype=net.dtype)
    has_val = len(splits.val) > 0
    if has_val:
        vsar, vmsi = _arrays(splits.val, splits.stats)
        vy = _net_targets(net, np.asarray(splits.val.labels))

    rng = np.random.default_rng(config.seed)
    net.reseed(config.seed)
    net.dropout_rate = config.dropout_rate
    params = net.parameters()
    best_acc, best_snap, stale = -1.0, None, 0
    n = len(y)

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        net.train()
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b, lo in enumerate(range(0, n, config.batch_size), start=1):
            idx = order[lo : lo + config.batch_size]
            try:
                with Tape() as tape:
                    loss, probs = net.loss_and_probs(sar[idx], msi[idx], onehot[idx])
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(epoch, b)
                tape.backward(loss)
            except NonFiniteError as exc:
                raise DivergenceError(epoch, b, f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
            adam_step(params, config.learning_rate, config.beta1, config.beta2, config.eps)
            loss_sum += value * len(idx)
            correct += int((ops.argmax_rows(probs) == y[idx]).sum())

        val_loss = val_acc = None
        if has_val:
            net.eval()
            vp = _batched_probs(net, vsar, vmsi, max(config.batch_size, 64))
            val_loss = _mean_ce(vp, vy)
            val_acc = float((ops.argmax_rows(vp) == vy).mean())
        rec = EpochRecord(epoch, loss_sum / n, correct / n, val_loss, val_acc, time.perf_counter() - t0)
        log.entries.append(rec)
        logger.info(
            "epoch %d: loss %.4f acc %.4f val_loss %s val_acc %s (%.1fs)",
            epoch, rec.train_loss, rec.train_acc, val_loss, val_acc, rec.seconds,
        )

        if has_val:
            if val_acc > best_acc:
                best_acc, best_snap, stale = val_acc, _snapshot(net), 0
                log.best_epoch = epoch
            else:
                stale += 1
                if config.early_stop_patience is not None and stale >= config.early_stop_patience:
                    logger.info("early stop after %d epochs without validation improvement", stale)
                    break
        if on_epoch is not None and on_epoch(rec):
            break

    if best_snap is not None:
        _restore(net, best_snap)
    elif log.entries:
        log.best_epoch = log.entries[-1].epoch
    net.eval()
    return net, log


# ---------------------------------------------------------------- evaluation


def _prediction_map(net_space: LabelSpace, eval_space: LabelSpace) -> np.ndarray:
    """Map from the network's output indices to ``eval_space`` indices."""
    if net_space == eval_space:
        return np.arange(eval_space.num_classes)
    if net_space.mode in ("original17", "original") and net_space.source_classes == eval_space.source_classes:
        return eval_space.merge_map
    raise ConfigurationError(
        f"cannot evaluate a {net_space.mode} ({net_space.num_classes}-class) model in {eval_space.mode} label space"
    )


def predict_split(net: FusionNetwork, split: PatchSet, stats: NormStats | None = None, batch_size: int = 64):
    """Probabilities for a whole split in infer mode."""
    net.eval()
    sar, msi = _arrays(split, stats)
    return _batched_probs(net, sar, msi, batch_size)


def evaluate(
    net: FusionNetwork,
    split: PatchSet,
    label_space: LabelSpace | None = None,
    stats: NormStats | None = None,
    batch_size: int = 64,
) -> ConfusionMatrix:
    """Confusion matrix (rows true, columns predicted) in ``label_space``."""
    if len(split) == 0:
        raise DataError("cannot evaluate an empty split")
    space = label_space or net.spec.label_space
    pmap = _prediction_map(net.spec.label_space, space)
    probs = predict_split(net, split, stats, batch_size)
    y_true = space.map(np.asarray(split.labels))
    y_pred = pmap[ops.argmax_rows(probs)]
    return confusion_matrix(y_true, y_pred, space.num_classes, space.class_names)


def tune_alpha(
    net: LateFusionNet,
    split: PatchSet,
    grid: Sequence[float] = DEFAULT_ALPHA_GRID,
    stats: NormStats | None = None,
    batch_size: int = 64,
) -> float:
    """Grid value of alpha maximising validation OA; ties go to the smaller alpha."""
    if not isinstance(net, LateFusionNet):
        raise ConfigurationError("alpha tuning applies to FM4 networks only")
    grid = [float(a) for a in grid]
    if not grid:
        raise ConfigurationError("alpha grid is empty")
    if any(not 0.0 <= a <= 1.0 for a in grid):
        raise ConfigurationError(f"alpha grid values must lie in [0, 1], got {grid}")
    if len(split) == 0:
        raise DataError("cannot tune alpha on an empty split")
    net.eval()
    sar, msi = _arrays(split, stats)
    ps, qs = [], []
    for lo in range(0, len(sar), batch_size):
        p, q = net.branch_probs(sar[lo : lo + batch_size], msi[lo : lo + batch_size])
        ps.append(p)
        qs.append(q)
    p = Tensor(np.concatenate([t.data for t in ps]))
    q = Tensor(np.concatenate([t.data for t in qs]))
    y = _net_targets(net, np.asarray(split.labels))
    best_alpha, best_oa = None, -1.0
    for alpha in sorted(grid):
        oa = float((ops.argmax_rows(net.combine(p, q, alpha)) == y).mean())
        if oa > best_oa:
            best_alpha, best_oa = alpha, oa
    logger.info("tuned alpha %.2f (validation OA %.4f)", best_alpha, best_oa)
    return best_alpha
