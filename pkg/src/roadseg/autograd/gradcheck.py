"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare analytic gradients of ``f(*inputs)`` against central differences.

    ``f`` must rebuild its graph from the given tensors on each call and
    return a scalar. Returns the maximum relative error over all input
    elements; two zero gradients count as error 0.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")

    with Tape():
        loss = f(*inputs)
        backward(loss)
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        for t in inputs
    ]

    max_err = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = f(*inputs).item()
            flat[i] = orig - h
            minus = f(*inputs).item()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * h)
            a = an.reshape(-1)[i]
            denom = max(abs(a), abs(numeric))
            if denom == 0.0:
                continue
            max_err = max(max_err, abs(a - numeric) / denom)
    return max_err
