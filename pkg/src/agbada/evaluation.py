"""Confusion matrix, classification report and training-history export."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Sequence

import numpy as np

from .data import IndexRow, ImageLoader
from .errors import DimensionError, ValidationError
from .model import CLASS_NAMES, SequentialModel
from .train import EpochRecord, evaluate_loss_accuracy

HISTORY_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr")


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[t][p]``: samples of true class ``t`` predicted as ``p``."""
    counts: tuple[tuple[int, int], tuple[int, int]]
    class_names: tuple[str, str] = CLASS_NAMES

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    def as_array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassificationReport:
    per_class: tuple[ClassMetrics, ...]
    accuracy: float
    macro: tuple[float, float, float]
    weighted: tuple[float, float, float]
    total: int
    class_names: tuple[str, ...] = CLASS_NAMES


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], class_names=CLASS_NAMES) -> ConfusionMatrix:
    y_true, y_pred = list(y_true), list(y_pred)
    if len(y_true) != len(y_pred):
        raise DimensionError(f"y_true has {len(y_true)} labels but y_pred has {len(y_pred)}")
    if not y_true:
        raise ValidationError("confusion_matrix needs at least one sample")
    counts = [[0, 0], [0, 0]]
    for t, p in zip(y_true, y_pred):
        if t not in (0, 1) or p not in (0, 1):
            raise ValidationError(f"labels must be 0 or 1, got ({t}, {p})")
        counts[int(t)][int(p)] += 1
    return ConfusionMatrix((tuple(counts[0]), tuple(counts[1])), tuple(class_names))


def _ratio(num, den) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def metrics(cm: ConfusionMatrix) -> ClassificationReport:
    """Per-class precision/recall/F1 plus accuracy, macro and weighted means.

    Undefined ratios (empty row or column) are reported as 0. Everything is
    computed in exact rationals and rounded once, so identities such as
    weighted recall == accuracy hold bit-for-bit.
    """
    c = cm.counts
    n = cm.total
    exact = []
    for k in range(2):
        tp = c[k][k]
        p = _ratio(tp, c[0][k] + c[1][k])
        r = _ratio(tp, c[k][0] + c[k][1])
        f1 = 2 * p * r / (p + r) if p + r else Fraction(0)
        exact.append((p, r, f1, c[k][0] + c[k][1]))
    accuracy = _ratio(c[0][0] + c[1][1], n)
    macro = tuple(float(sum(m[i] for m in exact) / 2) for i in range(3))
    weighted = tuple(float(_ratio(sum(m[i] * m[3] for m in exact), n)) for i in range(3))
    per_class = tuple(ClassMetrics(float(p), float(r), float(f1), s) for p, r, f1, s in exact)
    return ClassificationReport(per_class, float(accuracy), macro, weighted, n, cm.class_names)


def round_half_away(x: float, places: int = 2) -> str:
    """Display rounding: 0.875 -> '0.88', -0.125 -> '-0.13'."""
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def render_report(report: ClassificationReport, use_names: bool = False) -> str:
    """Plain-text table: precision, recall, f1-score, support per class,
    then accuracy, macro avg and weighted avg."""
    labels = list(report.class_names) if use_names else [str(i) for i in range(len(report.per_class))]
    width = max(12, *(len(label) for label in labels))
    fmt = lambda v: f"{round_half_away(v):>10}"
    lines = [" " * width + f"{'precision':>10}{'recall':>10}{'f1-score':>10}{'support':>10}", ""]
    for label, m in zip(labels, report.per_class):
        lines.append(f"{label:>{width}}{fmt(m.precision)}{fmt(m.recall)}{fmt(m.f1)}{m.support:>10}")
    lines.append("")
    lines.append(f"{'accuracy':>{width}}{'':>10}{'':>10}{fmt(report.accuracy)}{report.total:>10}")
    for name, vals in (("macro avg", report.macro), ("weighted avg", report.weighted)):
        lines.append(f"{name:>{width}}{fmt(vals[0])}{fmt(vals[1])}{fmt(vals[2])}{report.total:>10}")
    return "\n".join(lines) + "\n"


def render_confusion(cm: ConfusionMatrix) -> str:
    """Tab-separated grid: rows are true classes, columns predicted classes."""
    names = cm.class_names
    lines = ["true\\pred\t" + "\t".join(names)]
    for name, row in zip(names, cm.counts):
        lines.append(name + "\t" + "\t".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def parse_confusion(text: str) -> ConfusionMatrix:
    lines = [l.split("\t") for l in text.strip().splitlines()]
    names = tuple(lines[0][1:])
    counts = tuple(tuple(int(v) for v in l[1:]) for l in lines[1:])
    return ConfusionMatrix(counts, names)


@dataclass
class EvalResult:
    loss: float
    confusion: ConfusionMatrix
    report: ClassificationReport
    probabilities: np.ndarray


def evaluate_model(model: SequentialModel, rows: Sequence[IndexRow], batch_size: int,
                   loader: ImageLoader, threshold: float = 0.5) -> EvalResult:
    if not rows:
        raise ValidationError("evaluate_model needs at least one row")
    loss, _, p, y = evaluate_loss_accuracy(model, rows, batch_size, loader)
    cm = confusion_matrix(y.astype(int).tolist(), (p > threshold).astype(int).tolist(), model.class_names)
    return EvalResult(loss, cm, metrics(cm), p)


def export_history(records: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_HEADER)
    for r in records:
        writer.writerow([int(r.epoch)] + [repr(float(v)) for v in
                                          (r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr)])
    return buf.getvalue()


def parse_history(text: str) -> list[EpochRecord]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != HISTORY_HEADER:
        raise ValidationError(f"unexpected history header {header}")
    return [EpochRecord(int(r[0]), *(float(v) for v in r[1:])) for r in reader if r]
