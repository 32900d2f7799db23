"""AdamW with decoupled weight decay."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import NumericError
from .tensor import Param


def adamw_step(
    params: Iterable[Param],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One in-place AdamW update of every param from its ``grad``.

    The decay ``theta -= lr * wd * theta`` is applied first, then the
    bias-corrected moment step.
    """
    b1, b2 = betas
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {p.name or '<unnamed>'}")
    for p in params:
        p.step += 1
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.m = b1 * p.m + (1.0 - b1) * p.grad
        p.v = b2 * p.v + (1.0 - b2) * p.grad * p.grad
        m_hat = p.m / (1.0 - b1**p.step)
        v_hat = p.v / (1.0 - b2**p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self):
        adamw_step(self.params, self.lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
