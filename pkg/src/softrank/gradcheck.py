"""Central finite-difference oracle for gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .ndcore import Tensor, backward, no_grad


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d param by central differences; ``fn`` must return a scalar tensor."""
    # own a contiguous buffer so the flat view below writes through to the parameter
    param.data = np.array(param.data, dtype=np.float64, order="C")
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    backward(fn())
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def max_violation(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-6, rtol: float = 1e-5) -> float:
    """Largest ratio |a - n| / max(atol, rtol*|n|); a value <= 1 means the check passes."""
    err = np.abs(analytic - numeric)
    tol = np.maximum(atol, rtol * np.abs(numeric))
    return float((err / tol).max()) if err.size else 0.0


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    atol: float = 1e-6,
    rtol: float = 1e-5,
) -> float:
    """Worst tolerance ratio across ``params``; passes when <= 1."""
    worst = 0.0
    for p, a in zip(params, analytic_grads(fn, params)):
        worst = max(worst, max_violation(a, numeric_grad(fn, p, h), atol, rtol))
    return worst
