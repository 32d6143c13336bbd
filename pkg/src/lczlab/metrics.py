"""Confusion-matrix metrics: per-class A/P/R/F1/kappa, OA, subset OA, kappa, MCC, averages.

Orientation is fixed: rows are true classes, columns are predicted classes.
Zero denominators in P, R, F1 and MCC yield 0.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .data import LabelSpace
from .errors import DataError, UndefinedMetricError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: tuple | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DataError(f"confusion matrix must be square, got shape {counts.shape}")
        if counts.size and counts.min() < 0:
            raise DataError("confusion matrix entries must be non-negative")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(counts == np.round(counts)):
                raise DataError("confusion matrix entries must be integers")
        self.counts = counts.astype(np.int64)
        if self.class_names is None:
            self.class_names = tuple(str(i) for i in range(counts.shape[0]))
        self.class_names = tuple(self.class_names)
        if len(self.class_names) != counts.shape[0]:
            raise DataError(f"{len(self.class_names)} class names for a {counts.shape[0]}-class matrix")

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.class_names])
        for name, row in zip(self.class_names, self.counts):
            w.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        names = tuple(rows[0][1:])
        counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
        if tuple(r[0] for r in rows[1:]) != names:
            raise DataError("confusion CSV row and column headers differ")
        return cls(counts, names)


def confusion_matrix(y_true, y_pred, num_classes: int, class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError(f"label and prediction counts differ: {y_true.shape} vs {y_pred.shape}")
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(f"class indices outside 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts, tuple(class_names) if class_names is not None else None)


class ClassMetrics(NamedTuple):
    accuracy: float
    precision: float
    recall: float
    f1: float


def _div(a: float, b: float) -> float:
    return a / b if b else 0.0


def _one_vs_rest(cm: ConfusionMatrix, k: int) -> tuple[int, int, int, int]:
    c = cm.counts
    tp = int(c[k, k])
    fp = int(c[:, k].sum()) - tp
    fn = int(c[k, :].sum()) - tp
    tn = cm.total - tp - fp - fn
    return tp, tn, fp, fn


def class_metrics(cm: ConfusionMatrix, k: int) -> ClassMetrics:
    if not 0 <= k < cm.k:
        raise DataError(f"class index {k} outside 0..{cm.k - 1}")
    tp, tn, fp, fn = _one_vs_rest(cm, k)
    p = _div(tp, tp + fp)
    r = _div(tp, tp + fn)
    return ClassMetrics(_div(tp + tn, tp + tn + fp + fn), p, r, _div(2 * p * r, p + r))


def class_kappa(cm: ConfusionMatrix, k: int) -> float:
    """Cohen's kappa of the one-vs-rest 2x2 table of class ``k``."""
    tp, tn, fp, fn = _one_vs_rest(cm, k)
    return kappa(ConfusionMatrix(np.array([[tp, fn], [fp, tn]]), ("k", "rest")))


def _require_total(cm: ConfusionMatrix) -> int:
    total = cm.total
    if total == 0:
        raise UndefinedMetricError("metric undefined for an empty confusion matrix")
    return total


def overall_accuracy(cm: ConfusionMatrix) -> float:
    return int(np.trace(cm.counts)) / _require_total(cm)


def subset_accuracy(cm: ConfusionMatrix, indices: Sequence[int]) -> float:
    """Diagonal mass over the subset rows divided by those rows' totals."""
    idx = list(indices)
    if not idx:
        raise UndefinedMetricError("empty class subset")
    if min(idx) < 0 or max(idx) >= cm.k:
        raise DataError(f"subset indices {idx} outside 0..{cm.k - 1}")
    support = int(cm.counts[idx].sum())
    if support == 0:
        raise UndefinedMetricError(f"subset {idx} has zero support")
    return int(cm.counts[idx, idx].sum()) / support


def kappa(cm: ConfusionMatrix) -> float:
    total = _require_total(cm)
    po = int(np.trace(cm.counts)) / total
    pe = int((cm.counts.sum(axis=1) * cm.counts.sum(axis=0)).sum()) / (total * total)
    if pe == 1.0:
        return 0.0
    return (po - pe) / (1.0 - pe)


def mcc(cm: ConfusionMatrix) -> float:
    """Multiclass Matthews correlation from the c, s, t_k, p_k decomposition."""
    s = _require_total(cm)
    c = int(np.trace(cm.counts))
    t = [int(v) for v in cm.counts.sum(axis=1)]
    p = [int(v) for v in cm.counts.sum(axis=0)]
    num = c * s - sum(pk * tk for pk, tk in zip(p, t))
    den_p = s * s - sum(pk * pk for pk in p)
    den_t = s * s - sum(tk * tk for tk in t)
    if den_p == 0 or den_t == 0:
        return 0.0
    return num / math.sqrt(den_p * den_t)


def averages(values: Sequence[float], supports: Sequence[float], mode: str = "macro") -> float:
    values = np.asarray(values, dtype=np.float64)
    supports = np.asarray(supports, dtype=np.float64)
    if values.shape != supports.shape:
        raise DataError(f"{values.size} values but {supports.size} supports")
    if values.size == 0:
        raise UndefinedMetricError("no classes to average")
    if mode == "macro":
        return float(values.sum() / values.size)
    if mode == "weighted":
        total = supports.sum()
        if total == 0:
            raise UndefinedMetricError("weighted average with zero total support")
        return float(((supports / total) * values).sum())
    raise DataError(f"unknown averaging mode {mode!r}")


def merge_confusion(cm: ConfusionMatrix, space: LabelSpace) -> ConfusionMatrix:
    """Sum blocks of a source-label matrix into the merged label space.

    Within-group confusions land on the merged diagonal.
    """
    if cm.k != space.source_classes:
        raise DataError(f"{cm.k}x{cm.k} matrix does not match a {space.source_classes}-class label space")
    m = space.merge_map
    g = space.num_classes
    onehot = np.zeros((cm.k, g), dtype=np.int64)
    onehot[np.arange(cm.k), m] = 1
    return ConfusionMatrix(onehot.T @ cm.counts @ onehot, space.class_names)


# ---------------------------------------------------------------- report


@dataclass
class ClassReport:
    name: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    kappa: float
    support: int


@dataclass
class MetricReport:
    classes: list
    oa: float
    oa_bu: float | None
    oa_n: float | None
    kappa: float
    mcc: float
    macro: dict
    weighted: dict
    total: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _subset_or_none(cm: ConfusionMatrix, idx: Sequence[int]) -> float | None:
    try:
        return subset_accuracy(cm, idx)
    except UndefinedMetricError:
        return None


def metric_report(cm: ConfusionMatrix, space: LabelSpace | None = None) -> MetricReport:
    total = _require_total(cm)
    classes = []
    for k in range(cm.k):
        a, p, r, f1 = class_metrics(cm, k)
        classes.append(ClassReport(cm.class_names[k], a, p, r, f1, class_kappa(cm, k), int(cm.supports[k])))
    supports = [c.support for c in classes]
    macro, weighted = {}, {}
    for field_name in ("precision", "recall", "f1", "kappa"):
        vals = [getattr(c, field_name) for c in classes]
        macro[field_name] = averages(vals, supports, "macro")
        weighted[field_name] = averages(vals, supports, "weighted")
    built_up = space.built_up if space is not None and space.num_classes == cm.k else ()
    natural = space.natural if space is not None and space.num_classes == cm.k else ()
    return MetricReport(
        classes=classes,
        oa=overall_accuracy(cm),
        oa_bu=_subset_or_none(cm, built_up) if built_up else None,
        oa_n=_subset_or_none(cm, natural) if natural else None,
        kappa=kappa(cm),
        mcc=mcc(cm),
        macro=macro,
        weighted=weighted,
        total=total,
    )
