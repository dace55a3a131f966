"""Binary classification metrics: confusion counts, accuracy/recall/precision/F1, ROC and AUC.

The positive class is 1.  Ratios whose denominator is zero evaluate to 0.0;
:func:`degenerate_flags` names which ones did so.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def swapped(self) -> "ConfusionCounts":
        """Counts under the opposite positive-class convention."""
        return ConfusionCounts(tp=self.tn, tn=self.tp, fp=self.fn, fn=self.fp)


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray  # descending; thresholds[0] = +inf sentinel
    fpr: np.ndarray
    tpr: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a flat sequence")
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr.astype(np.int64)


def confusion(predictions, labels) -> ConfusionCounts:
    pred = _binary(predictions, "predictions")
    true = _binary(labels, "labels")
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
    return ConfusionCounts(
        tp=int(np.sum((pred == 1) & (true == 1))),
        tn=int(np.sum((pred == 0) & (true == 0))),
        fp=int(np.sum((pred == 1) & (true == 0))),
        fn=int(np.sum((pred == 0) & (true == 1))),
    )


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("accuracy of an empty confusion table")
    return (c.tp + c.tn) / c.total


def recall(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return c.tp / denom if denom else 0.0


def precision(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp
    return c.tp / denom if denom else 0.0


def f1_from(prec: float, rec: float) -> float:
    """Harmonic mean of precision and recall (0 when both are 0)."""
    return 2.0 * prec * rec / (prec + rec) if prec + rec else 0.0


def f1(c: ConfusionCounts) -> float:
    return f1_from(precision(c), recall(c))


def degenerate_flags(c: ConfusionCounts) -> list[str]:
    flags = []
    if c.tp + c.fn == 0:
        flags.append("recall_zero_denominator")
    if c.tp + c.fp == 0:
        flags.append("precision_zero_denominator")
    if precision(c) + recall(c) == 0:
        flags.append("f1_zero_denominator")
    return flags


def roc_curve(scores, labels) -> RocCurve:
    """One (fpr, tpr) point per threshold; a sample is positive when score >= threshold.

    Thresholds are +inf followed by the distinct scores in descending order, so
    the curve runs from (0, 0) to (1, 1).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels, "labels")
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if s.size and (not np.all(np.isfinite(s)) or s.min() < 0.0 or s.max() > 1.0):
        raise ValueError("scores must lie in [0, 1]")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_curve needs both classes present")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # index of the last occurrence of each distinct score in the descending sweep
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tps = np.cumsum(y_sorted)[last]
    fps = (last + 1) - tps
    thresholds = np.r_[np.inf, s_sorted[last]]
    return RocCurve(thresholds, np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos])


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the ROC curve."""
    fpr, tpr = curve.fpr, curve.tpr
    if fpr.shape != tpr.shape or fpr.size < 2 or np.any(np.diff(fpr) < 0):
        raise ValueError("invalid ROC curve")
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def concordance(scores, labels) -> float:
    """Fraction of (positive, negative) pairs where the positive scores higher; ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels, "labels")
    pos, neg = s[y == 1], s[y == 0]
    if not pos.size or not neg.size:
        raise ValueError("concordance needs both classes present")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def as_percent(value: float) -> str:
    """Two-decimal percentage, rounding halves up (presentation only)."""
    return str(Decimal(repr(value * 100.0)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def metrics_report(labels, predictions, scores) -> dict:
    c = confusion(predictions, labels)
    report = {
        "accuracy": accuracy(c),
        "recall": recall(c),
        "precision": precision(c),
        "f1": f1(c),
        "auc": None,
        "confusion": asdict(c),
        "degenerate_flags": degenerate_flags(c),
    }
    y = np.asarray(labels)
    if 0 < y.sum() < y.size:
        report["auc"] = auc(roc_curve(scores, labels))
    else:
        report["degenerate_flags"].append("auc_single_class")
    return report


def write_metrics_json(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, x, y in zip(curve.thresholds, curve.fpr, curve.tpr):
            writer.writerow([repr(float(t)), repr(float(x)), repr(float(y))])
