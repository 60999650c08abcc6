"""Pixel-wise segmentation metrics, ROC/AUC and precision-recall curves."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .engine.tensor import Tensor
from .errors import ParameterError, ShapeError, UsageError

DEFAULT_THRESHOLD = 0.5
TABLE_COLUMNS = ("Accuracy", "Sensitivity", "Specificity", "AUC", "F1-Score")


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def _flatten_pair(pred, truth, fov=None) -> tuple[np.ndarray, np.ndarray]:
    p, t = _array(pred), _array(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != truth shape {t.shape}")
    p, t = p.ravel(), t.ravel().astype(bool)
    if fov is not None:
        f = _array(fov)
        if f.size != p.size:
            raise ShapeError(f"FOV has {f.size} elements, prediction has {p.size}")
        keep = f.ravel().astype(bool)
        p, t = p[keep], t[keep]
    return p, t


def confusion(pred_prob, truth, threshold: float = DEFAULT_THRESHOLD, fov=None) -> ConfusionCounts:
    """Count outcomes with ``prob >= threshold`` as positive; pixels outside ``fov`` are skipped."""
    if not 0 < threshold < 1:
        raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
    p, t = _flatten_pair(pred_prob, truth, fov)
    pos = p >= threshold
    tp = int(np.count_nonzero(pos & t))
    fp = int(np.count_nonzero(pos & ~t))
    fn = int(np.count_nonzero(~pos & t))
    return ConfusionCounts(tp=tp, tn=int(p.size) - tp - fp - fn, fp=fp, fn=fn)


@dataclass
class Curve:
    """Operating points of a threshold sweep.

    ``x``/``y`` are FPR/TPR for ROC curves and recall/precision for PR curves.
    """

    thresholds: np.ndarray
    x: np.ndarray
    y: np.ndarray
    header: tuple[str, str, str]

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.y.tolist()))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            for t, a, b in zip(self.thresholds, self.x, self.y):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    recall: float
    f1: float
    auc: Optional[float] = None
    counts: Optional[ConfusionCounts] = None
    roc: Optional[Curve] = None
    pr: Optional[Curve] = None
    degenerate: tuple[str, ...] = field(default_factory=tuple)

    @property
    def roc_points(self) -> list[tuple[float, float]]:
        return self.roc.points if self.roc is not None else []

    @property
    def pr_points(self) -> list[tuple[float, float]]:
        return self.pr.points if self.pr is not None else []


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def derive_metrics(c: ConfusionCounts) -> MetricsReport:
    """Accuracy, sensitivity, specificity, precision, recall and F1 from counts.

    A 0/0 ratio evaluates to 0 and its name is listed in ``degenerate``.
    """
    if c.total == 0:
        raise UsageError("no evaluated pixels")
    flags: list[str] = []
    accuracy = (c.tp + c.tn) / c.total
    sensitivity = _ratio(c.tp, c.tp + c.fn, "sensitivity", flags)
    specificity = _ratio(c.tn, c.tn + c.fp, "specificity", flags)
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    recall = sensitivity
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    return MetricsReport(accuracy, sensitivity, specificity, precision, recall, f1, counts=c,
                         degenerate=tuple(flags))


def _sweep(scores, labels):
    """Cumulative TP/FP counts at each distinct threshold, highest first."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ShapeError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(~y)[last_of_run]
    return s[last_of_run], tp, fp, int(y.sum()), int((~y).sum())


def roc_auc(scores, labels) -> tuple[Curve, float]:
    """ROC over every distinct score threshold and its trapezoidal area.

    The first point, at threshold +inf, is (0, 0); the last, at the lowest
    score, is (1, 1). Tied scores form one step, so the area equals the
    Mann-Whitney statistic with ties counted one half.
    """
    thr, tp, fp, n_pos, n_neg = _sweep(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise UsageError("ROC needs at least one positive and one negative label")
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return Curve(np.r_[np.inf, thr], fpr, tpr, ("threshold", "fpr", "tpr")), auc


def pr_curve(scores, labels) -> Curve:
    """Precision and recall at each distinct threshold, ordered by increasing threshold."""
    thr, tp, fp, n_pos, _ = _sweep(scores, labels)
    if n_pos == 0:
        raise UsageError("precision-recall curve needs at least one positive label")
    recall = tp / n_pos
    precision = tp / (tp + fp)
    return Curve(thr[::-1].copy(), recall[::-1].copy(), precision[::-1].copy(), ("threshold", "recall", "precision"))


def evaluate_scores(scores, truth, threshold: float = DEFAULT_THRESHOLD, fov=None) -> MetricsReport:
    """Full report (scalar metrics plus ROC/PR curves) for one pooled pixel set."""
    p, t = _flatten_pair(scores, truth, fov)
    report = derive_metrics(confusion(p, t, threshold))
    if t.any() and not t.all():
        report.roc, report.auc = roc_auc(p, t)
    if t.any():
        report.pr = pr_curve(p, t)
    return report


def _cell(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return f"{'-':>6}"
    return f"{value:.4f}"


def report_header(method_width: int = 16) -> str:
    return f"{'Method':<{method_width}} " + " ".join(TABLE_COLUMNS)


def format_report(report: MetricsReport, method: str = "", method_width: int = 16) -> str:
    """Fixed-width row: method, accuracy, sensitivity, specificity, AUC, F1 (4 d.p.)."""
    values = (report.accuracy, report.sensitivity, report.specificity, report.auc, report.f1)
    return f"{method:<{method_width}} " + " ".join(_cell(v) for v in values)


def write_report_csv(path, rows: list[tuple[str, MetricsReport]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "accuracy", "sensitivity", "specificity", "precision", "recall", "f1", "auc",
                    "tp", "tn", "fp", "fn"])
        for method, r in rows:
            c = r.counts or ConfusionCounts(0, 0, 0, 0)
            w.writerow([method] + [f"{v:.6f}" if v is not None else "" for v in
                                   (r.accuracy, r.sensitivity, r.specificity, r.precision, r.recall, r.f1, r.auc)]
                       + [c.tp, c.tn, c.fp, c.fn])


def save_curves(report: MetricsReport, directory) -> None:
    d = Path(directory)
    if report.roc is not None:
        report.roc.to_csv(d / "roc.csv")
    if report.pr is not None:
        report.pr.to_csv(d / "pr.csv")
