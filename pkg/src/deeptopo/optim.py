"""AdamW with support masks."""
from __future__ import annotations

import math
from typing import Iterable, Optional

import numpy as np

from .tensor import Tensor


class AdamW:
    """Adam with decoupled weight decay.

    Decay applies only to parameters with two or more dimensions (weights and
    kernels; not biases, norm scales or tokens). Parameters listed in
    ``masks`` have the mask applied to both the gradient and the updated
    value, so masked-out entries stay exactly zero.
    """

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, masks: Optional[dict[str, np.ndarray]] = None):
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        if weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        self.params = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.masks = dict(masks or {})
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        for n, p in self.params:
            if n in self.masks:
                p.data *= self.masks[n]

    def decays(self, name: str, p: Tensor) -> bool:
        return p.ndim >= 2

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        step_size = self.lr / c1
        for n, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            mask = self.masks.get(n)
            if mask is not None:
                g = g * mask
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if self.weight_decay and self.decays(n, p):
                p.data *= 1 - self.lr * self.weight_decay
            p.data -= step_size * m / (np.sqrt(v) / math.sqrt(c2) + self.eps)
            if mask is not None:
                p.data *= mask
