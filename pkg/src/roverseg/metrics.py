"""Confusion-matrix evaluation: per-class Acc/IoU/F1 plus obstacle-class means.

Acc is per-class recall TP/(TP+FN).  Aggregates average the two obstacle
classes (crater=1, rock=2) only; background never enters a mean.  A class
with no ground-truth and no predicted pixels scores (1,1,1) so that
correctly predicting absence is not penalized; a class with predictions but
no ground truth keeps acc=1 by vacuity while iou/f1 count the false
positives.
"""

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, Tuple

import numpy as np

from .autodiff import Tensor
from .errors import DomainError, ShapeError

CLASS_NAMES = {0: "background", 1: "crater", 2: "rock"}
OBSTACLE_CLASSES = (1, 2)


class ConfusionMatrix:
    def __init__(self, num_classes=3):
        if num_classes < 2:
            raise ShapeError("need at least 2 classes")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, other):
        if other.num_classes != self.num_classes:
            raise ShapeError("confusion matrix size mismatch")
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())


def argmax_labels(logits) -> np.ndarray:
    """Per-pixel argmax over channels; ties resolve to the lowest class index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim != 3:
        raise ShapeError(f"expected (C,H,W) logits, got {arr.shape}")
    return arr.argmax(axis=0).astype(np.uint8)


def accumulate(pred: np.ndarray, gt: np.ndarray, cm: ConfusionMatrix) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    c = cm.num_classes
    if pred.size:
        if pred.min() < 0 or pred.max() >= c or gt.min() < 0 or gt.max() >= c:
            raise DomainError(f"label values outside [0, {c})")
        flat = gt.astype(np.int64).ravel() * c + pred.astype(np.int64).ravel()
        cm.counts += np.bincount(flat, minlength=c * c).reshape(c, c)
    return cm


def class_metrics(cm: ConfusionMatrix, c: int) -> Tuple[float, float, float]:
    if not (0 <= c < cm.num_classes):
        raise ShapeError(f"class {c} out of range")
    tp = int(cm.counts[c, c])
    fn = int(cm.counts[c].sum()) - tp
    fp = int(cm.counts[:, c].sum()) - tp
    if tp + fn + fp == 0:
        return (1.0, 1.0, 1.0)
    acc = 1.0 if tp + fn == 0 else tp / (tp + fn)
    iou = tp / (tp + fp + fn)
    f1 = 2 * tp / (2 * tp + fp + fn)
    return (acc, iou, f1)


@dataclass
class MetricsReport:
    per_class: Dict[int, Tuple[float, float, float]]
    m_acc: float
    m_iou: float
    m_f1: float


def compute_report(cm: ConfusionMatrix) -> MetricsReport:
    per = {c: class_metrics(cm, c) for c in OBSTACLE_CLASSES}
    accs, ious, f1s = zip(*(per[c] for c in OBSTACLE_CLASSES))
    return MetricsReport(per, float(np.mean(accs)), float(np.mean(ious)), float(np.mean(f1s)))


def aggregate(report: MetricsReport) -> Tuple[float, float, float]:
    """Arithmetic mean of each metric over the obstacle classes."""
    for c in OBSTACLE_CLASSES:
        if c not in report.per_class:
            raise ShapeError(f"report is missing obstacle class {c}")
    accs, ious, f1s = zip(*(report.per_class[c] for c in OBSTACLE_CLASSES))
    return (float(np.mean(accs)), float(np.mean(ious)), float(np.mean(f1s)))


def format_pct(frac: float) -> str:
    """Fraction -> percent string, two decimals, ties rounded half up.

    Quantizes at 1e-9 first so a double like 92.78999999999999 prints as the
    92.79 it represents instead of truncating down.
    """
    d = Decimal(frac * 100.0).quantize(Decimal("1e-9"), rounding=ROUND_HALF_UP)
    return str(d.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def report_lines(report: MetricsReport):
    lines = []
    for c in OBSTACLE_CLASSES:
        acc, iou, f1 = report.per_class[c]
        lines.append(f"class={c} acc={acc:.6f} iou={iou:.6f} f1={f1:.6f}")
    lines.append(f"mean acc={report.m_acc:.6f} iou={report.m_iou:.6f} f1={report.m_f1:.6f}")
    return lines


def format_report(report: MetricsReport, title="overall") -> str:
    rows = [f"[{title}]", f"{'class':<12}{'Acc':>8}{'IoU':>8}{'F1':>8}"]
    for c in OBSTACLE_CLASSES:
        acc, iou, f1 = report.per_class[c]
        rows.append(f"{CLASS_NAMES[c]:<12}{format_pct(acc):>8}{format_pct(iou):>8}{format_pct(f1):>8}")
    rows.append(f"{'mean':<12}{format_pct(report.m_acc):>8}{format_pct(report.m_iou):>8}{format_pct(report.m_f1):>8}")
    return "\n".join(rows)
