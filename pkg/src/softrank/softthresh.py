"""Differentiable soft threshold on singular values.

    f(x) = x * tanh(s (x - alpha))   if x >= alpha
           c * tanh(s (x - alpha))   otherwise

With c = 0 everything below the cut-off is exactly zero while values above it
keep a smooth path for gradients into both x and alpha.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndcore import ContractError, Tensor, _node

DEFAULT_SHARPNESS = 10.0


@dataclass
class SoftThresholdParams:
    alpha: float = 0.0
    s: float = DEFAULT_SHARPNESS
    c: float = 0.0

    def __post_init__(self):
        if not self.s > 0:
            raise ContractError(f"sharpness s must be positive, got {self.s}")


def _parts(x: np.ndarray, alpha: float, s: float):
    above = x >= alpha
    t = np.tanh(s * (x - alpha))
    return above, t


def soft_threshold_forward(x, p: SoftThresholdParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    above, t = _parts(x, p.alpha, p.s)
    return np.where(above, x * t, p.c * t)


def soft_threshold_backward(x, p: SoftThresholdParams, upstream) -> tuple[np.ndarray, float]:
    """Return (dL/dx, dL/dalpha) given dL/df.

    At x == alpha the upper branch is used. alpha is shared, so its gradient
    is summed over all entries.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    above, t = _parts(x, p.alpha, p.s)
    sech2 = 1.0 - t * t
    dfdx = np.where(above, t + x * p.s * sech2, p.c * p.s * sech2)
    dfda = np.where(above, -x * p.s * sech2, -p.c * p.s * sech2)
    return upstream * dfdx, float((upstream * dfda).sum())


def soft_threshold(x: Tensor, alpha: Tensor, s: float, c: float = 0.0) -> Tensor:
    """Tape op: threshold vector ``x`` with a scalar (shape ()) learnable ``alpha``."""
    if alpha.data.size != 1:
        raise ContractError(f"alpha must be a scalar, got shape {alpha.shape}")
    p = SoftThresholdParams(float(alpha.data.reshape(-1)[0]), s, c)
    out = soft_threshold_forward(x.data, p)

    def backward(g):
        dx, da = soft_threshold_backward(x.data, p, g)
        return dx, np.full(alpha.shape, da)

    return _node(out, (x, alpha), backward, "soft_threshold")
