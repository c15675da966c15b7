"""Per-channel sigmoid cross-entropy plus soft-Dice loss."""
from __future__ import annotations

import numpy as np

from .layers import ShapeMismatch

DICE_SMOOTH = 1.0


def sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def _targets(logits, lung_gt, inf_gt):
    t = np.stack([np.asarray(lung_gt, dtype=np.float64), np.asarray(inf_gt, dtype=np.float64)], axis=1)
    if logits.ndim != 4 or logits.shape[1] != 2 or t.shape != logits.shape:
        raise ShapeMismatch(f"logits {logits.shape} do not match targets {t.shape}")
    return t


def loss_terms(logits, lung_gt, inf_gt, smooth: float = DICE_SMOOTH) -> dict:
    """Per-channel BCE and Dice values (channel 0 lung, 1 infection)."""
    t = _targets(logits, lung_gt, inf_gt)
    bce = (np.maximum(logits, 0) - logits * t + np.log1p(np.exp(-np.abs(logits)))).mean(axis=(0, 2, 3))
    p = sigmoid(logits)
    inter = (p * t).sum(axis=(0, 2, 3))
    denom = p.sum(axis=(0, 2, 3)) + t.sum(axis=(0, 2, 3)) + smooth
    dice = (2 * inter + smooth) / denom
    return {"bce": bce, "dice": dice}


def loss(logits, lung_gt, inf_gt, smooth: float = DICE_SMOOTH) -> float:
    terms = loss_terms(logits, lung_gt, inf_gt, smooth)
    return float(np.mean(terms["bce"] + 1.0 - terms["dice"]))


def loss_and_grad(logits, lung_gt, inf_gt, smooth: float = DICE_SMOOTH):
    """Loss value and its gradient with respect to the logits."""
    t = _targets(logits, lung_gt, inf_gt)
    n, c, h, w = logits.shape
    m = n * h * w
    p = sigmoid(logits)
    bce = (np.maximum(logits, 0) - logits * t + np.log1p(np.exp(-np.abs(logits)))).mean(axis=(0, 2, 3))
    inter = (p * t).sum(axis=(0, 2, 3))
    denom = p.sum(axis=(0, 2, 3)) + t.sum(axis=(0, 2, 3)) + smooth
    dice = (2 * inter + smooth) / denom
    value = float(np.mean(bce + 1.0 - dice))

    inter_b = inter[None, :, None, None]
    denom_b = denom[None, :, None, None]
    ddice_dp = (2 * t * denom_b - (2 * inter_b + smooth)) / denom_b ** 2
    grad = ((p - t) / m - ddice_dp * p * (1 - p)) / c
    return value, grad
