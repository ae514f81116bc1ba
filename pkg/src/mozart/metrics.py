"""Confusion counts, accuracy/precision/recall/F1, and the comparison table."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import InvalidArgument

DEFAULT_THRESHOLD = 0.5
METRIC_ROWS = (("Accuracy", "accuracy"), ("Precision", "precision"), ("Recall", "recall"), ("F1 Score", "f1"))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int
    threshold: float = DEFAULT_THRESHOLD

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_precision_recall(cls, accuracy, precision, recall):
        return cls(float(accuracy), float(precision), float(recall), f1_score(precision, recall))

    def as_dict(self):
        return asdict(self)


def f1_score(precision, recall):
    """Harmonic mean of precision and recall; 0 when both are 0."""
    s = precision + recall
    return 0.0 if s == 0 else 2.0 * precision * recall / s


def confusion(labels, probabilities, threshold=DEFAULT_THRESHOLD) -> ConfusionMatrix:
    """Tally predictions where ``p >= threshold`` counts as positive."""
    y = np.asarray(labels).reshape(-1)
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    if y.shape != p.shape:
        raise InvalidArgument(f"{y.size} labels but {p.size} probabilities")
    if y.size == 0:
        raise InvalidArgument("no samples to evaluate")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidArgument("labels must be 0 or 1")
    if not 0.0 < threshold < 1.0:
        raise InvalidArgument(f"threshold must be in (0, 1), got {threshold}")
    pos = y == 1
    pred = p >= threshold
    tp = int(np.count_nonzero(pred & pos))
    fp = int(np.count_nonzero(pred & ~pos))
    fn = int(np.count_nonzero(~pred & pos))
    tn = int(y.size - tp - fp - fn)
    return ConfusionMatrix(tp, tn, fp, fn, float(threshold))


def compute_metrics(cm: ConfusionMatrix) -> MetricSet:
    """Degenerate denominators yield 0 rather than raising."""
    if cm.total <= 0:
        raise InvalidArgument("confusion matrix is empty")
    accuracy = (cm.tp + cm.tn) / cm.total
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else 0.0
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    return MetricSet(accuracy, precision, recall, f1_score(precision, recall))


def evaluate(labels, probabilities, threshold=DEFAULT_THRESHOLD) -> MetricSet:
    return compute_metrics(confusion(labels, probabilities, threshold))


def format_percent(ratio) -> str:
    """``0.98345 -> '98.35%'``: two decimals, round half up on the decimal value."""
    d = (Decimal(repr(float(ratio))) * 100).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{d}%"


def comparison_report(named) -> str:
    """Metric-by-model table as CSV text.

    ``named`` is a mapping or a sequence of ``(model name, MetricSet)`` pairs;
    columns keep the given order.
    """
    items = list(named.items()) if hasattr(named, "items") else list(named)
    if not items:
        raise InvalidArgument("comparison report needs at least one model")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Metric"] + [name for name, _ in items])
    for label, attr in METRIC_ROWS:
        writer.writerow([label] + [format_percent(getattr(ms, attr)) for _, ms in items])
    return buf.getvalue()


def parse_report(text) -> dict:
    """Inverse of :func:`comparison_report`: ``{model: {row label: percent float}}``."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][0] != "Metric":
        raise InvalidArgument("not a comparison report")
    models = rows[0][1:]
    out = {m: {} for m in models}
    for row in rows[1:]:
        for m, cell in zip(models, row[1:]):
            out[m][row[0]] = float(cell.rstrip("%"))
    return out
