"""Adam optimizer and the single training step."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layers import SegNetError
from .loss import loss_and_grad
from .model import DeepLabV3Plus

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteLoss(SegNetError):
    pass


@dataclass
class TrainState:
    model: DeepLabV3Plus
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.model.parameters().items():
            self.m.setdefault(name, np.zeros_like(arr))
            self.v.setdefault(name, np.zeros_like(arr))


def adam_update(state: TrainState, grads: dict, lr: float) -> None:
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, arr in state.model.parameters().items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def train_step(state: TrainState, batch, lr: float) -> float:
    """One forward pass, one backward pass and one Adam update.

    ``batch`` is ``(images, lung_masks, infection_masks)`` with images of
    shape (N, C, H, W) and masks of shape (N, H, W). Returns the loss before
    the update.
    """
    images, lung, inf = batch
    logits, cache = state.model.forward(images)
    value, dlogits = loss_and_grad(logits, lung, inf)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss is {value} at step {state.step}")
    grads = {}
    state.model.backward(dlogits, cache, grads)
    adam_update(state, grads, lr)
    return value
