"""Confusion-matrix based segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError

VOID = 255


class ConfusionMatrix:
    """``C x C`` pixel counts; rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise UsageError("num_classes must be positive")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, prediction, truth, void_label: int = VOID) -> "ConfusionMatrix":
        p = np.asarray(prediction).ravel().astype(np.int64)
        t = np.asarray(truth).ravel().astype(np.int64)
        if p.shape != t.shape:
            raise UsageError(f"prediction has {p.size} pixels, truth has {t.size}")
        keep = t != void_label
        p, t = p[keep], t[keep]
        c = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= c or p.min() < 0 or p.max() >= c):
            raise UsageError(f"class index outside [0, {c})")
        self.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise UsageError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both truth and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)

    def miou(self) -> float:
        iou = self.iou()
        present = ~np.isnan(iou)
        return float(iou[present].mean()) if present.any() else float("nan")


@dataclass
class SegmentationMetrics:
    confusion: ConfusionMatrix
    iou: np.ndarray
    miou: float

    def to_dict(self) -> dict:
        return {"miou": self.miou,
                "iou": [None if np.isnan(v) else float(v) for v in self.iou],
                "confusion": self.confusion.counts.tolist()}


def argmax_classes(logits: np.ndarray) -> np.ndarray:
    """Per-pixel class index; ties resolve to the lowest index."""
    return np.argmax(logits, axis=1)


def segmentation_metrics(cm: ConfusionMatrix) -> SegmentationMetrics:
    return SegmentationMetrics(cm, cm.iou(), cm.miou())
