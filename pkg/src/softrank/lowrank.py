"""Linear layers in dense, thresholded-SVD and merged two-factor form.

All layers compute ``y = x W^T + b`` for a weight ``W`` of shape (M, N): M
outputs, N inputs. The decomposed layer evaluates ``((x V) * Th(sigma)) U^T``
without ever materialising the product of its factors.
"""

from __future__ import annotations

import logging
from typing import Optional, Union

import numpy as np

from . import ndcore as nd
from .linalg import svd
from .ndcore import ContractError, DimensionError, Tensor
from .softthresh import DEFAULT_SHARPNESS, SoftThresholdParams, soft_threshold, soft_threshold_forward

logger = logging.getLogger(__name__)

ZERO_EPS = 1e-8
MODES = ("dense", "decomposed", "merged")


def _check_input(x: Tensor, n: int) -> None:
    if x.shape[-1] != n:
        raise DimensionError(f"layer expects trailing dimension {n}, got input shape {x.shape}")


def _bias_param(bias, m: int) -> Optional[Tensor]:
    if bias is None:
        return None
    b = np.asarray(getattr(bias, "data", bias), dtype=np.float64)
    if b.shape != (m,):
        raise DimensionError(f"bias shape {b.shape} does not match {m} outputs")
    return nd.parameter(b)


class DenseLinear:
    kind = "dense"

    def __init__(self, weight, bias=None):
        w = np.asarray(getattr(weight, "data", weight), dtype=np.float64)
        if w.ndim != 2:
            raise DimensionError(f"weight must be 2-D, got shape {w.shape}")
        self.W = nd.parameter(w)
        self.bias = _bias_param(bias, w.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self.shape[1])
        y = x @ nd.swapaxes(self.W, 0, 1)
        return y if self.bias is None else y + self.bias

    __call__ = forward

    def parameters(self) -> dict[str, Tensor]:
        out = {"W": self.W}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def weight(self) -> np.ndarray:
        return self.W.data.copy()

    def rank(self, eps: float = ZERO_EPS) -> int:
        return min(self.shape)


class DecomposedLinear:
    """``W ~ U diag(Th_s(sigma)) V^T`` with one learnable cut-off ``alpha``."""

    kind = "decomposed"

    def __init__(self, U, sigma, V, alpha: float = 0.0, s: float = DEFAULT_SHARPNESS, c: float = 0.0, bias=None):
        U, sigma, V = (np.asarray(a, dtype=np.float64) for a in (U, sigma, V))
        r = sigma.shape[0]
        if U.ndim != 2 or V.ndim != 2 or U.shape[1] != r or V.shape[1] != r:
            raise DimensionError(f"inconsistent factors U{U.shape}, sigma{sigma.shape}, V{V.shape}")
        SoftThresholdParams(alpha, s, c)  # validates s
        self.U = nd.parameter(U)
        self.sigma = nd.parameter(sigma)
        self.V = nd.parameter(V)
        self.alpha = nd.parameter(np.float64(alpha))
        self.s = float(s)
        self.c = float(c)
        self.bias = _bias_param(bias, U.shape[0])
        self.frozen = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]

    @property
    def thresh(self) -> SoftThresholdParams:
        return SoftThresholdParams(float(self.alpha.data), self.s, self.c)

    def freeze(self) -> None:
        self.frozen = True

    def thresholded(self) -> np.ndarray:
        return soft_threshold_forward(self.sigma.data, self.thresh)

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self.shape[1])
        h = x @ self.V
        h = h * soft_threshold(self.sigma, self.alpha, self.s, self.c)
        y = h @ nd.swapaxes(self.U, 0, 1)
        return y if self.bias is None else y + self.bias

    __call__ = forward

    def parameters(self) -> dict[str, Tensor]:
        out = {"U": self.U, "sigma": self.sigma, "V": self.V, "alpha": self.alpha}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def weight(self) -> np.ndarray:
        return (self.U.data * self.thresholded()) @ self.V.data.T

    def rank(self, eps: float = ZERO_EPS) -> int:
        return effective_rank(self, eps)


class MergedLinear:
    """Two-factor form ``y = x VS U^T + b`` with retained rank k."""

    kind = "merged"

    def __init__(self, U_k, VS_k, bias=None, trainable: bool = False):
        U_k = np.asarray(U_k, dtype=np.float64)
        VS_k = np.asarray(VS_k, dtype=np.float64)
        if U_k.ndim != 2 or VS_k.ndim != 2 or U_k.shape[1] != VS_k.shape[1]:
            raise DimensionError(f"inconsistent merged factors U_k{U_k.shape}, VS_k{VS_k.shape}")
        self.U_k = Tensor(U_k, requires_grad=trainable)
        self.VS_k = Tensor(VS_k, requires_grad=trainable)
        self.bias = _bias_param(bias, U_k.shape[0])
        if self.bias is not None:
            self.bias.requires_grad = trainable

    @property
    def shape(self) -> tuple[int, int]:
        return self.U_k.shape[0], self.VS_k.shape[0]

    @property
    def k(self) -> int:
        return self.U_k.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self.shape[1])
        y = (x @ self.VS_k) @ nd.swapaxes(self.U_k, 0, 1)
        return y if self.bias is None else y + self.bias

    __call__ = forward

    def parameters(self) -> dict[str, Tensor]:
        out = {"U_k": self.U_k, "VS_k": self.VS_k}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def weight(self) -> np.ndarray:
        return self.U_k.data @ self.VS_k.data.T

    def rank(self, eps: float = ZERO_EPS) -> int:
        return self.k


Linear = Union[DenseLinear, DecomposedLinear, MergedLinear]


def calibrate_sigma(sigma, s: float, tol: float = 1e-12) -> np.ndarray:
    """Invert ``g(t) = t tanh(s t)`` elementwise by bisection.

    Storing the returned values makes the zero-threshold layer reproduce the
    dense weight exactly (up to ``tol``).
    """
    target = np.asarray(sigma, dtype=np.float64)
    if np.any(target < 0):
        raise ContractError("singular values must be non-negative")
    lo = np.zeros_like(target)
    hi = target + 1.0
    while True:
        short = hi * np.tanh(s * hi) < target
        if not short.any():
            break
        hi = np.where(short, hi * 2.0, hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = mid * np.tanh(s * mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) <= tol:
            break
    return 0.5 * (lo + hi)


def decompose(w, s: float = DEFAULT_SHARPNESS, bias=None, calibrate: bool = False, c: float = 0.0) -> DecomposedLinear:
    """SVD a dense weight into a trainable thresholded layer with alpha = 0."""
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    res = svd(w)
    sigma = calibrate_sigma(res.sigma, s) if calibrate else res.sigma
    return DecomposedLinear(res.U, sigma, res.V, alpha=0.0, s=s, c=c, bias=bias)


def effective_rank(layer: Linear, eps: float = ZERO_EPS) -> int:
    """Count of thresholded singular values with magnitude above ``eps``."""
    if isinstance(layer, DecomposedLinear):
        return int(np.count_nonzero(np.abs(layer.thresholded()) > eps))
    return layer.rank(eps)


def param_count(layer: Linear, mode: str = "merged", eps: float = ZERO_EPS) -> int:
    """Weight parameters (bias excluded, see :func:`bias_count`).

    ``dense``: M*N. ``decomposed`` and ``merged``: k*(M+N) at the effective
    rank k. A layer still stored dense always reports M*N.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
    m, n = layer.shape
    if mode == "dense" or isinstance(layer, DenseLinear):
        return m * n
    return effective_rank(layer, eps) * (m + n)


def bias_count(layer: Linear) -> int:
    return 0 if layer.bias is None else layer.bias.data.size


def mac_count(layer: Linear, mode: str = "merged", seq_len: int = 1, eps: float = ZERO_EPS) -> int:
    """Multiply-accumulates for ``seq_len`` input rows: L*M*N dense, L*k*(M+N) factored."""
    return seq_len * param_count(layer, mode, eps)


def break_even_rank(m: int, n: int) -> float:
    return m * n / (m + n)


def merge(layer: DecomposedLinear, eps: float = ZERO_EPS) -> MergedLinear:
    """Fold the thresholded singular values into V and drop suppressed directions."""
    if not layer.frozen:
        raise ContractError("merge requires a frozen layer; call freeze() once training is finished")
    th = layer.thresholded()
    keep = np.flatnonzero(np.abs(th) > eps)
    if keep.size == 0:
        logger.warning("merge produced a rank-0 layer of shape %s; it outputs its bias only", layer.shape)
    U_k = layer.U.data[:, keep]
    VS_k = layer.V.data[:, keep] * th[keep]
    bias = None if layer.bias is None else layer.bias.data
    return MergedLinear(U_k, VS_k, bias)


def truncated(w, k: int, bias=None, trainable: bool = True) -> MergedLinear:
    """Hard rank-k truncation of a dense weight as a two-factor layer (no threshold)."""
    res = svd(np.asarray(getattr(w, "data", w), dtype=np.float64))
    if not 0 <= k <= res.rank:
        raise ContractError(f"truncation rank k={k} outside [0, {res.rank}]")
    return MergedLinear(res.U[:, :k], res.V[:, :k] * res.sigma[:k], bias, trainable=trainable)
