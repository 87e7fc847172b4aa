"""Confusion-matrix metrics, one-vs-rest AUC and report serialization."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError

METRIC_NAMES = ("precision", "accuracy", "sensitivity", "specificity", "auc")


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_labels(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, c: int) -> tuple[int, int, int, int]:
        """(TP, FP, FN, TN) treating class ``c`` as positive."""
        tp = int(self.counts[c, c])
        fp = int(self.counts[:, c].sum()) - tp
        fn = int(self.counts[c, :].sum()) - tp
        return tp, fp, fn, self.total - tp - fp - fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def auc_rank(scores, positive) -> float | None:
    """Mann-Whitney AUC from mid-ranks; ties between classes count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, positive) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) points from a threshold sweep over the distinct scores."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], positive[order]
    last_of_run = np.r_[s[1:] != s[:-1], True]
    tps = np.cumsum(p)[last_of_run]
    fps = np.cumsum(~p)[last_of_run]
    tpr = np.r_[0.0, tps / max(int(p.sum()), 1)]
    fpr = np.r_[0.0, fps / max(int((~p).sum()), 1)]
    return fpr, tpr


def auc_trapezoid(scores, positive) -> float | None:
    positive = np.asarray(positive, dtype=bool)
    if positive.all() or not positive.any():
        return None
    fpr, tpr = roc_curve(scores, positive)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class ClassMetrics:
    name: str
    support: int
    precision: float | None
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    auc: float | None

    def get(self, metric: str) -> float | None:
        return getattr(self, metric)


@dataclass
class MetricsReport:
    per_class: list[ClassMetrics]
    accuracy: float
    total: int
    macro: dict[str, float | None] = field(default_factory=dict)
    weighted: dict[str, float | None] = field(default_factory=dict)

    def to_tsv(self) -> str:
        header = ["class", "support", *METRIC_NAMES]
        lines = ["\t".join(header)]
        for m in self.per_class:
            lines.append("\t".join([m.name, str(m.support)] + [_fmt(m.get(k)) for k in METRIC_NAMES]))
        for tag, agg in (("__macro__", self.macro), ("__weighted__", self.weighted)):
            lines.append("\t".join([tag, str(self.total)] + [_fmt(agg.get(k)) for k in METRIC_NAMES]))
        acc = ["", _fmt(self.accuracy), "", "", ""]
        lines.append("\t".join(["__accuracy__", str(self.total)] + acc))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max([len(m.name) for m in self.per_class] + [9])
        head = f"{'class':<{width}}  " + "  ".join(f"{k:>11}" for k in METRIC_NAMES) + f"  {'support':>7}"
        lines = [head, "-" * len(head)]

        def row(name, values, support):
            cells = "  ".join(f"{_fmt(v, 3):>11}" for v in values)
            return f"{name:<{width}}  {cells}  {support:>7}"

        for m in self.per_class:
            lines.append(row(m.name, [m.get(k) for k in METRIC_NAMES], m.support))
        lines.append("-" * len(head))
        lines.append(row("Avg", [self.macro.get(k) for k in METRIC_NAMES], self.total))
        lines.append(row("W. Avg", [self.weighted.get(k) for k in METRIC_NAMES], self.total))
        lines.append("")
        lines.append(f"overall accuracy: {_fmt(self.accuracy, 4)} ({self.total} samples)")
        return "\n".join(lines) + "\n"


def _fmt(v, digits: int = 6) -> str:
    return "undefined" if v is None else f"{v:.{digits}f}"


def average(values: Sequence[float | None], weights: Sequence[float] | None = None) -> float | None:
    """Mean over defined values; ``weights`` gives the support-weighted mean."""
    pairs = [(v, 1.0 if weights is None else float(w))
             for v, w in zip(values, weights if weights is not None else values) if v is not None]
    total = sum(w for _, w in pairs)
    if not pairs or total == 0:
        return None
    return sum(v * w for v, w in pairs) / total


def metrics_from_confusion(cm: ConfusionMatrix, scores=None, labels=None,
                           class_names: Sequence[str] | None = None) -> MetricsReport:
    """Per-class one-vs-rest metrics plus macro and support-weighted averages.

    Rates whose denominator is zero are reported as ``None`` ("undefined")
    and left out of the averages.
    """
    c_count = cm.num_classes
    names = list(class_names) if class_names is not None else [str(c) for c in range(c_count)]
    if len(names) != c_count:
        raise ShapeError(f"{len(names)} class names for {c_count} classes")
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels)
        if scores.shape != (labels.size, c_count):
            raise ShapeError(f"scores {scores.shape} do not match {labels.size} labels x {c_count} classes")
    total = cm.total
    per_class = []
    for c in range(c_count):
        tp, fp, fn, tn = cm.one_vs_rest(c)
        auc = auc_rank(scores[:, c], labels == c) if scores is not None else None
        m = ClassMetrics(
            name=names[c],
            support=tp + fn,
            precision=_ratio(tp, tp + fp),
            accuracy=_ratio(tp + tn, total),
            sensitivity=_ratio(tp, tp + fn),
            specificity=_ratio(tn, tn + fp),
            auc=auc,
        )
        undefined = [k for k in METRIC_NAMES if m.get(k) is None and (k != "auc" or scores is not None)]
        if undefined:
            warnings.warn(f"class {names[c]!r}: {', '.join(undefined)} undefined", stacklevel=2)
        per_class.append(m)
    supports = [m.support for m in per_class]
    macro = {k: average([m.get(k) for m in per_class]) for k in METRIC_NAMES}
    weighted = {k: average([m.get(k) for m in per_class], supports) for k in METRIC_NAMES}
    accuracy = float(np.trace(cm.counts) / total) if total else None
    return MetricsReport(per_class, accuracy, total, macro, weighted)
