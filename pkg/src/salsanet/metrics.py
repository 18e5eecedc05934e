"""Confusion matrix accumulation and per-class precision / recall / IoU."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .projection import CLASS_NAMES, NUM_CLASSES


@dataclass
class ConfusionMatrix:
    """``counts[g, p]`` = number of cells with ground truth ``g`` predicted as ``p``."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        k = NUM_CLASSES
        idx = gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= k * k):
            raise ValueError("class id out of range")
        self.counts = self.counts + np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def class_scores(self, i: int) -> Tuple[float, float, float]:
        return class_scores(self, i)

    def mean_iou(self) -> float:
        return mean_iou(self)


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return ConfusionMatrix(cm.counts.copy()).accumulate(pred, gt)


def _ratio(num: int, den: int, vacuous: bool) -> float:
    if den == 0:
        return 1.0 if vacuous else 0.0
    return num / den


def class_scores(cm: ConfusionMatrix, i: int) -> Tuple[float, float, float]:
    """``(precision, recall, IoU)`` of class ``i``.

    Empty denominators give 1.0 when the class is absent from both prediction
    and ground truth, 0.0 otherwise.
    """
    c = cm.counts
    tp = int(c[i, i])
    fp = int(c[:, i].sum()) - tp
    fn = int(c[i, :].sum()) - tp
    absent = tp + fp + fn == 0
    return (_ratio(tp, tp + fp, absent), _ratio(tp, tp + fn, absent),
            _ratio(tp, tp + fp + fn, absent))


def mean_iou_of(ious) -> float:
    return float(np.mean(ious))


def mean_iou(cm: ConfusionMatrix) -> float:
    return mean_iou_of([class_scores(cm, i)[2] for i in range(NUM_CLASSES)])


def report_csv(cm: ConfusionMatrix) -> str:
    """Per-class P/R/IoU in percent, then the mean IoU row."""
    rows = ["class,precision,recall,iou"]
    for i, name in enumerate(CLASS_NAMES):
        p, r, iou = class_scores(cm, i)
        rows.append(f"{name},{100 * p:.2f},{100 * r:.2f},{100 * iou:.2f}")
    rows.append(f"mean_iou,,,{100 * mean_iou(cm):.2f}")
    return "\n".join(rows) + "\n"
