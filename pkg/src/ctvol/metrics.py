"""Pixel confusion counts and Intersection-over-Union."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np


class MetricsError(ValueError):
    pass


class ShapeMismatch(MetricsError):
    pass


class NonBinaryInput(MetricsError):
    pass


class EmptyDataset(MetricsError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return asdict(self)


def _check_binary(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool and not np.isin(a, (0, 1)).all():
        raise NonBinaryInput(f"{what} holds values other than 0 and 1")
    return a.astype(bool)


def confusion_counts(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    p = _check_binary(pred, "pred")
    g = _check_binary(gt, "gt")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def iou(c: ConfusionCounts) -> float:
    """tp / (tp + fp + fn); two empty masks agree perfectly (1.0)."""
    union = c.tp + c.fp + c.fn
    return 1.0 if union == 0 else c.tp / union


def mask_iou(pred, gt) -> float:
    return iou(confusion_counts(pred, gt))


def dataset_counts(pairs: Iterable) -> tuple[list, list]:
    """Per-slice (lung, infection) counts for pairs of (2, H, W) pred/gt stacks."""
    lung, inf = [], []
    for pred, gt in pairs:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.ndim != 3 or pred.shape[0] != 2:
            raise ShapeMismatch(f"expected (2, H, W) masks (lung, infection), got {pred.shape}")
        lung.append(confusion_counts(pred[0], gt[0]))
        inf.append(confusion_counts(pred[1], gt[1]))
    return lung, inf


def dataset_iou(pairs: Iterable, reduction: str = "pooled") -> tuple[float, float]:
    """(lung IoU, infection IoU) over a sequence of slices.

    ``pooled`` sums confusion counts across all slices before dividing;
    ``mean`` averages the per-slice IoUs.
    """
    lung, inf = dataset_counts(pairs)
    if not lung:
        raise EmptyDataset("dataset_iou needs at least one slice pair")
    if reduction == "pooled":
        return iou(sum(lung, ConfusionCounts())), iou(sum(inf, ConfusionCounts()))
    if reduction == "mean":
        return float(np.mean([iou(c) for c in lung])), float(np.mean([iou(c) for c in inf]))
    raise MetricsError(f"unknown reduction {reduction!r}")
