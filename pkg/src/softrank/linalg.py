"""One-sided (Hestenes) Jacobi SVD and truncation.

Column pairs are rotated until mutually orthogonal. Each sweep uses a
round-robin schedule so that the n/2 disjoint pairs of a round are rotated in
one vectorised numpy step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndcore import ContractError

MAX_SWEEPS = 60
TOL = 1e-15


class SVDConvergenceError(ArithmeticError):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(f"Jacobi SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:.3e})")
        self.residual = residual


@dataclass
class SvdResult:
    U: np.ndarray  # M x r
    sigma: np.ndarray  # r, non-increasing
    V: np.ndarray  # N x r

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of disjoint pairs covering all pairs once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.int64), np.array(qs, dtype=np.int64)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_basis(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns where ``good`` is False by an orthonormal completion."""
    U = U.copy()
    m = U.shape[0]
    basis = [U[:, j] for j in range(U.shape[1]) if good[j]]
    candidates = iter(np.eye(m))
    for j in np.flatnonzero(~good):
        while True:
            v = next(candidates).copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                break
        U[:, j] = v / nv
        basis.append(U[:, j])
    return U


def _jacobi_tall(a: np.ndarray) -> SvdResult:
    A = a.copy()
    m, n = A.shape
    V = np.eye(n)
    rounds = _round_robin(n)
    residual = 0.0
    for sweep in range(MAX_SWEEPS):
        residual = 0.0
        for p, q in rounds:
            if p.size == 0:
                continue
            Ap, Aq = A[:, p], A[:, q]
            alpha = np.einsum("ij,ij->j", Ap, Ap)
            beta = np.einsum("ij,ij->j", Aq, Aq)
            gamma = np.einsum("ij,ij->j", Ap, Aq)
            denom = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(denom > 0, np.abs(gamma) / denom, 0.0)
            residual = max(residual, float(ratio.max()))
            active = ratio > TOL
            if not active.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                zeta = np.where(active, (beta - alpha) / (2.0 * gamma), 0.0)
            t = np.where(active, np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta)), 0.0)
            t = np.where(active & (zeta == 0), 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            A[:, p], A[:, q] = c * Ap - s * Aq, s * Ap + c * Aq
            Vp, Vq = V[:, p], V[:, q]
            V[:, p], V[:, q] = c * Vp - s * Vq, s * Vp + c * Vq
        if residual <= TOL:
            break
    else:
        raise SVDConvergenceError(residual, MAX_SWEEPS)

    sigma = np.linalg.norm(A, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, A, V = sigma[order], A[:, order], V[:, order]
    smax = sigma[0] if sigma.size else 0.0
    good = sigma > smax * 1e-14 if smax > 0 else np.zeros(sigma.shape, dtype=bool)
    U = np.zeros_like(A)
    U[:, good] = A[:, good] / sigma[good]
    if not good.all():
        U = _complete_basis(U, good)
        sigma = np.where(good, sigma, 0.0)
    return SvdResult(U, sigma, V)


def _fix_signs(res: SvdResult) -> SvdResult:
    idx = np.argmax(np.abs(res.U), axis=0)
    signs = np.sign(res.U[idx, np.arange(res.U.shape[1])])
    signs[signs == 0] = 1.0
    return SvdResult(res.U * signs, res.sigma, res.V * signs)


def svd(w) -> SvdResult:
    """Thin SVD ``w = U diag(sigma) V^T`` with r = min(M, N).

    Sigma is sorted non-increasing (ties keep Jacobi order) and each column of
    U has a non-negative largest-magnitude entry.
    """
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    if w.ndim != 2 or min(w.shape) < 1:
        raise ContractError(f"svd expects a non-empty 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ContractError("svd input contains non-finite entries")
    if w.shape[0] >= w.shape[1]:
        res = _jacobi_tall(w)
    else:
        t = _jacobi_tall(w.T)
        res = SvdResult(t.V, t.sigma, t.U)
    return _fix_signs(res)


def truncate(res: SvdResult, k: int) -> SvdResult:
    """Keep the leading k triplets (best rank-k approximation in Frobenius norm)."""
    if not 1 <= k <= res.rank:
        raise ContractError(f"truncation rank k={k} outside [1, {res.rank}]")
    return SvdResult(res.U[:, :k].copy(), res.sigma[:k].copy(), res.V[:, :k].copy())
