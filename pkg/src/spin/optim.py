"""AdamW with decoupled weight decay, plus the single-cycle cosine schedule."""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """lr(t) = lr_min + 0.5 * (lr_max - lr_min) * (1 + cos(pi * t / T))."""
    frac = step / total_steps if total_steps > 0 else 1.0
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled weight decay: the decay term multiplies the weight directly
    and never enters the moment estimates, so decay-only steps leave the
    moments at zero."""

    def __init__(self, params, lr=0.005, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        seen = set()
        self.params: list[Tensor] = []
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                self.params.append(p)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        self.step_count += 1
        t = self.step_count
        lr = self.lr if lr is None else lr
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
