"""Central finite-difference verification of the hand-written backward passes."""
from __future__ import annotations

import numpy as np

from .layers import Module, bilinear_upsample, bilinear_upsample_backward
from .loss import loss, loss_and_grad

FD_STEP = 1e-5
# Coordinates whose gradient is tiny next to the largest gradient component
# are compared against GRAD_SCALE_FLOOR * max|grad| instead of their own
# magnitude; otherwise rounding noise in an exactly-zero gradient (e.g. a
# dead ReLU) reads as an O(1) relative error. ROUNDOFF_MARGIN keeps the
# floor above the rounding level of the central difference itself.
GRAD_SCALE_FLOOR = 1e-3
ROUNDOFF_MARGIN = 1e3


class UpsampleProbe(Module):
    def __init__(self, factor):
        super().__init__("upsample")
        self.factor = factor

    def forward(self, x):
        return bilinear_upsample(x, self.factor), None

    def backward(self, dy, cache, grads):
        return bilinear_upsample_backward(dy, self.factor)


class LossProbe(Module):
    """Treats the input as logits and the loss as the (scalar) output."""

    def __init__(self, lung_gt, inf_gt):
        super().__init__("loss")
        self.lung_gt = lung_gt
        self.inf_gt = inf_gt

    def forward(self, x):
        return np.array(loss(x, self.lung_gt, self.inf_gt)), x

    def backward(self, dy, cache, grads):
        _, g = loss_and_grad(cache, self.lung_gt, self.inf_gt)
        return float(dy) * g


class ModelWithLoss(Module):
    """A network followed by the training loss, for end-to-end checks."""

    def __init__(self, model, lung_gt, inf_gt):
        super().__init__("model_loss")
        self.model = model
        self.lung_gt = lung_gt
        self.inf_gt = inf_gt

    def parameters(self):
        return self.model.parameters()

    def forward(self, x):
        logits, cache = self.model.forward(x)
        return np.array(loss(logits, self.lung_gt, self.inf_gt)), (logits, cache)

    def backward(self, dy, cache, grads):
        logits, mcache = cache
        _, g = loss_and_grad(logits, self.lung_gt, self.inf_gt)
        return self.model.backward(float(dy) * g, mcache, grads)


def noise_floor(objective_value: float, grad_scale: float, step: float = FD_STEP) -> float:
    roundoff = ROUNDOFF_MARGIN * np.finfo(np.float64).eps * max(1.0, abs(objective_value)) / step
    return max(roundoff, GRAD_SCALE_FLOOR * grad_scale)


def relative_error(analytic, numeric, floor: float = 0.0) -> np.ndarray:
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor, np.finfo(np.float64).tiny))
    return np.abs(a - n) / denom


def grad_check(layer, input_shape, seed: int = 0, step: float = FD_STEP, details: bool = False):
    """Max relative error between analytic and central-difference gradients.

    Every parameter coordinate and every input coordinate is perturbed. A
    non-scalar output is reduced to a scalar with a fixed random projection
    so that all output sites carry gradient.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=input_shape)
    y, cache = layer.forward(x)
    proj = rng.normal(size=np.shape(y)) if np.ndim(y) else np.array(1.0)

    def objective():
        out, _ = layer.forward(x)
        return float(np.sum(proj * out))

    grads = {}
    dx = layer.backward(proj if np.ndim(y) else 1.0, cache, grads)
    scale = max([np.abs(dx).max()] + [np.abs(g).max() for g in grads.values() if g.size])
    floor = noise_floor(float(np.sum(proj * y)), scale, step)

    errors = {}

    def check(arr, analytic, key):
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            fp = objective()
            arr[idx] = orig - step
            fm = objective()
            arr[idx] = orig
            numeric[idx] = (fp - fm) / (2 * step)
        errors[key] = float(relative_error(analytic, numeric, floor).max()) if arr.size else 0.0

    check(x, dx, "input")
    for name, arr in layer.parameters().items():
        check(arr, grads.get(name, np.zeros_like(arr)), name)
    worst = max(errors.values())
    return (worst, errors) if details else worst
