"""Optimizers and learning-rate schedules.

Frozen parameters and parameters that received no gradient are skipped
entirely: they are neither decayed nor stepped.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Parameter


class Optimizer:
    def __init__(self, params, lr: float):
        self.params: list[Parameter] = [p for p in params]
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _active(self):
        for p in self.params:
            if p.frozen or p.grad is None:
                continue
            yield p

    def step(self):
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, np.ndarray] = {}

    def step(self):
        for p in self._active():
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity.get(id(p))
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[id(p)] = v
                g = v
            p.data -= self.lr * g


class AdamW(Optimizer):
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        super().__init__(params, lr)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, int] = {}

    def step(self):
        b1, b2 = self.betas
        for p in self._active():
            t = self._t.get(id(p), 0) + 1
            self._t[id(p)] = t
            m = self._m.get(id(p))
            v = self._v.get(id(p))
            m = (1 - b1) * p.grad if m is None else b1 * m + (1 - b1) * p.grad
            v = (1 - b2) * p.grad**2 if v is None else b2 * v + (1 - b2) * p.grad**2
            self._m[id(p)], self._v[id(p)] = m, v
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def lr_at(step: int, total_steps: int, base_lr: float, schedule: str = "cosine",
          warmup_frac: float = 0.05) -> float:
    """Per-step learning rate with linear warmup."""
    warmup = max(1, int(total_steps * warmup_frac)) if warmup_frac > 0 else 0
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        span = max(1, total_steps - warmup)
        progress = min(1.0, (step - warmup) / span)
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    raise ValueError(f"unknown schedule {schedule!r}")
