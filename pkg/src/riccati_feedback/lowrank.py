"""Symmetric low-rank factors ``X = L D L^T``.

``D`` may be indefinite; BDF history terms enter the Riccati constant term
with negative weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as spla

EPS = np.finfo(float).eps
DENSE_GUARD = 5000


class GuardError(ValueError):
    """Raised when an operation would materialize a too large dense matrix."""


@dataclass(frozen=True)
class LowRankFactor:
    L: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        if L.ndim == 1:
            L = L[:, None]
        if D.size == 0:
            D = np.zeros((L.shape[1], L.shape[1]))
        if D.shape != (L.shape[1], L.shape[1]):
            raise ValueError(f"core shape {D.shape} does not match {L.shape[1]} columns")
        nD = np.linalg.norm(D) if D.size else 0.0
        if np.linalg.norm(D - D.T) > 1e-14 * (1 + nD) * max(1, D.shape[0]):
            raise ValueError("core matrix D is not symmetric")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "D", 0.5 * (D + D.T))

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def s(self) -> int:
        return self.L.shape[1]

    @classmethod
    def zeros(cls, n: int) -> "LowRankFactor":
        return cls(np.zeros((n, 0)), np.zeros((0, 0)))

    def scaled(self, c: float) -> "LowRankFactor":
        return LowRankFactor(self.L, c * self.D)

    def apply(self, V: np.ndarray) -> np.ndarray:
        """``X @ V`` without forming ``X``."""
        return self.L @ (self.D @ (self.L.T @ V))


def concat(parts) -> LowRankFactor:
    """Sum of factors: column-concatenated ``L`` and block-diagonal ``D``."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat needs at least one factor")
    n = parts[0].n
    if any(p.n != n for p in parts):
        raise ValueError("dimension mismatch in concat: " + str([p.n for p in parts]))
    if len(parts) == 1:
        return parts[0]
    L = np.hstack([p.L for p in parts])
    D = spla.block_diag(*[p.D for p in parts]) if L.shape[1] else np.zeros((0, 0))
    return LowRankFactor(L, D)


def _core_eig(f: LowRankFactor):
    """Orthonormal basis ``Q`` and eigenpairs of the projected core ``R D R^T``."""
    Q, R = np.linalg.qr(f.L, mode="reduced")
    w, V = np.linalg.eigh(R @ f.D @ R.T)
    return Q, w, V


def truncation_threshold(sigma_max: float, rel_tol=None) -> float:
    """Absolute cut-off for eigenvalues of the represented matrix.

    Default rule: machine precision times ``sigma_max``, where ``sigma_max``
    is the spectral norm of ``X`` (the square of the largest singular value of
    a square-root factor ``Z`` with ``X = Z Z^T``). An explicit ``rel_tol``
    replaces machine precision.
    """
    return (EPS if rel_tol is None else rel_tol) * sigma_max


def compress(f: LowRankFactor, rel_tol=None) -> LowRankFactor:
    """Column compression by thin QR plus an eigendecomposition of the core.

    Eigenvalues of ``X`` with magnitude at most the truncation threshold are
    dropped; the result has orthonormal ``L`` and diagonal ``D``.
    """
    if not (np.all(np.isfinite(f.L)) and np.all(np.isfinite(f.D))):
        raise ValueError("non-finite entries in low-rank factor")
    if f.s == 0:
        return f
    Q, w, V = _core_eig(f)
    sigma = np.abs(w).max() if w.size else 0.0
    if sigma == 0.0:
        return LowRankFactor.zeros(f.n)
    keep = np.abs(w) > truncation_threshold(sigma, rel_tol)
    order = np.argsort(-np.abs(w[keep]))
    w, V = w[keep][order], V[:, keep][:, order]
    return LowRankFactor(Q @ V, np.diag(w))


def densify(f: LowRankFactor) -> np.ndarray:
    if f.n > DENSE_GUARD:
        raise GuardError(f"refusing to densify n={f.n} > {DENSE_GUARD}")
    if f.s == 0:
        return np.zeros((f.n, f.n))
    X = f.L @ f.D @ f.L.T
    return 0.5 * (X + X.T)


def numerical_rank(f: LowRankFactor, rel_tol=None) -> int:
    """Number of eigenvalues of ``X`` above the truncation threshold."""
    if f.s == 0:
        return 0
    _, w, _ = _core_eig(f)
    sigma = np.abs(w).max()
    if sigma == 0.0:
        return 0
    return int(np.count_nonzero(np.abs(w) > truncation_threshold(sigma, rel_tol)))


def spectral_norm(f: LowRankFactor) -> float:
    if f.s == 0:
        return 0.0
    _, w, _ = _core_eig(f)
    return float(np.abs(w).max())


def frobenius_norm(f: LowRankFactor) -> float:
    if f.s == 0:
        return 0.0
    _, w, _ = _core_eig(f)
    return float(np.linalg.norm(w))


def from_dense(X: np.ndarray, rel_tol=None) -> LowRankFactor:
    """Factor a symmetric dense matrix by its eigendecomposition."""
    X = 0.5 * (X + X.T)
    w, V = np.linalg.eigh(X)
    sigma = np.abs(w).max() if w.size else 0.0
    if sigma == 0.0:
        return LowRankFactor.zeros(X.shape[0])
    keep = np.abs(w) > truncation_threshold(sigma, rel_tol)
    order = np.argsort(-np.abs(w[keep]))
    return LowRankFactor(V[:, keep][:, order], np.diag(w[keep][order]))
