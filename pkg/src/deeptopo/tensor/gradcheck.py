from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, no_grad


def grad_check(
    closure: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients of a scalar closure with central differences.

    Every element of every input is perturbed by ``±step``. Returns
    ``max |analytic - numeric| / (|analytic| + 1e-8)`` over all elements.
    Inputs must be 64-bit.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit inputs")
        t.requires_grad = True
        t.grad = None
    out = closure(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check closure must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, ana in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            aflat = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(closure(*inputs).data)
                flat[i] = orig - step
                fm = float(closure(*inputs).data)
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                err = abs(aflat[i] - num) / (abs(aflat[i]) + 1e-8)
                worst = max(worst, err)
    return worst
