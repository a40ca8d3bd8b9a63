"""Generalized algebraic Riccati equations of one implicit DRE step.

The equation solved for symmetric ``X`` is

    0 = C^T S C + A^T X M + M^T X A - M^T X B B^T X M

with a symmetric (possibly indefinite) core ``S``. Two backends are
provided: a dense Newton-Kleinman iteration whose Lyapunov steps are solved
by a Bartels-Stewart type solver, and a low-rank Newton-ADI iteration that
works with ``L D L^T`` factors only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as spla
import scipy.sparse as sps
import scipy.sparse.linalg as spsla

from .lowrank import LowRankFactor, compress, concat, from_dense
from .sysmodel import to_dense

logger = logging.getLogger(__name__)

DENSE_GUARD = 2000


class AreDivergenceError(RuntimeError):
    """Newton (or inner ADI) iteration failed to reach the tolerance."""

    def __init__(self, message, residual=None, trace=None):
        super().__init__(message)
        self.residual = residual
        self.trace = trace or []


class FactorizationError(RuntimeError):
    pass


class UnsupportedCoreError(ValueError):
    pass


@dataclass
class AreProblem:
    A: object
    M: object
    B: np.ndarray
    C: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if self.B.shape[0] != self.n and self.B.size == 0:
            self.B = np.zeros((self.n, 0))
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        if self.C.size == 0:
            self.C = np.zeros((0, self.n))
            self.S = np.zeros((0, 0))
        if self.S.shape != (self.q, self.q):
            raise ValueError(f"core S has shape {self.S.shape}, expected {(self.q, self.q)}")
        if np.linalg.norm(self.S - self.S.T) > 1e-12 * (1 + np.linalg.norm(self.S)):
            raise ValueError("core S must be symmetric")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.C.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def constant_term(self) -> np.ndarray:
        return self.C.T @ self.S @ self.C

    def constant_norm(self) -> float:
        """Frobenius norm of ``C^T S C`` computed from the small factors."""
        if self.q == 0:
            return 0.0
        _, R = np.linalg.qr(self.C.T, mode="reduced")
        return float(np.linalg.norm(R @ self.S @ R.T))


@dataclass
class AdiOptions:
    n_shifts: int = 25
    max_steps: int = 50
    arnoldi_plus: int = 20
    arnoldi_minus: int = 10
    compress_tol: float = 1e-14
    seed: int = 0
    extra: dict = field(default_factory=dict)


def are_residual(prob: AreProblem, X: LowRankFactor, scale_floor: float = 1.0) -> float:
    """Relative Frobenius residual ``||R(X)||_F / max(1, ||C^T S C||_F)``.

    ``scale_floor`` replaces the ``1`` in the normalization; ``0`` gives a
    purely relative residual for problems with small data.

    Evaluated in factored form: ``R(X) = U T U^T`` with
    ``U = [C^T, A^T L, M^T L]`` and a small block core ``T``.
    """
    scale = _scale(prob.constant_norm(), scale_floor)
    if X.s == 0:
        return prob.constant_norm() / scale
    L, D = X.L, X.D
    AtL = np.asarray(prob.A.T @ L)
    MtL = np.asarray(prob.M.T @ L)
    BtL = prob.B.T @ L
    q, s = prob.q, X.s
    U = np.hstack([prob.C.T, AtL, MtL])
    T = np.zeros((q + 2 * s, q + 2 * s))
    T[:q, :q] = prob.S
    T[q:q + s, q + s:] = D
    T[q + s:, q:q + s] = D
    T[q + s:, q + s:] = -D @ BtL.T @ BtL @ D
    _, R = np.linalg.qr(U, mode="reduced")
    return float(np.linalg.norm(R @ T @ R.T)) / scale


def _scale(norm_csc, scale_floor):
    s = max(scale_floor, norm_csc)
    return s if s > 0 else 1.0


def _residual_dense(prob, Ad, Md, CSC, X):
    XM = X @ Md
    BtXM = prob.B.T @ XM
    R = CSC + Ad.T @ XM + XM.T @ Ad - BtXM.T @ BtXM
    return np.linalg.norm(R)


def solve_are_dense(prob: AreProblem, tol: float = 1e-10, max_iter: int = 50,
                    X0: LowRankFactor = None, trace: list = None,
                    compress_tol: float = 1e-14, scale_floor: float = 1.0,
                    stagnation: float = 0.0) -> LowRankFactor:
    """Newton-Kleinman iteration with dense Lyapunov solves.

    Each Newton step solves ``F^T X M + M^T X F = -(C^T S C + K^T K)`` with
    ``K = B^T X_j M`` and ``F = A - B K`` after transforming by ``M^{-1}``.
    The iteration starts from ``X0`` (warm start) or zero; if a warm start
    fails the solve is restarted from zero.

    With ``stagnation > 0`` an iterate is also accepted once the residual is
    below ``stagnation`` and no longer decreases by at least a factor two,
    i.e. when the tolerance lies below the attainable rounding level.
    """
    if prob.n > DENSE_GUARD:
        raise ValueError(f"dense ARE backend limited to n <= {DENSE_GUARD}")
    Ad, Md = to_dense(prob.A), to_dense(prob.M)
    try:
        Mlu = spla.lu_factor(Md, check_finite=True)
    except (ValueError, spla.LinAlgError) as exc:
        raise FactorizationError(f"cannot factorize M: {exc}") from exc
    if np.any(np.abs(np.diag(Mlu[0])) <= 1e-300):
        raise FactorizationError("M is singular")
    CSC = prob.constant_term()
    scale = _scale(np.linalg.norm(CSC), scale_floor)
    starts = [X0, None] if X0 is not None and X0.s > 0 else [None]
    last = None
    for start in starts:
        try:
            X = _newton_dense(prob, Ad, Md, Mlu, CSC, scale, tol, max_iter, start, trace,
                              stagnation)
            return from_dense(X, rel_tol=compress_tol)
        except AreDivergenceError as exc:
            last = exc
            logger.debug("dense Newton failed from %s start: %s",
                         "warm" if start is not None else "zero", exc)
    raise last


def _stagnated(history, stagnation):
    return (stagnation > 0 and len(history) >= 2 and history[-1] <= stagnation
            and history[-1] > 0.5 * history[-2])


def _newton_dense(prob, Ad, Md, Mlu, CSC, scale, tol, max_iter, X0, trace, stagnation=0.0):
    n = prob.n
    X = np.zeros((n, n)) if X0 is None else X0.L @ X0.D @ X0.L.T
    res = _residual_dense(prob, Ad, Md, CSC, X) / scale
    history = [res]
    if trace is not None:
        trace.append({"iteration": 0, "residual": res, "inner": 0})
    if res <= tol:
        return X
    X_prev = X
    for it in range(1, max_iter + 1):
        K = prob.B.T @ X @ Md
        F = Ad - prob.B @ K
        # (F M^{-1})^T = M^{-T} F^T
        a = spla.lu_solve(Mlu, F.T, trans=1)
        rhs = spla.lu_solve(Mlu, spla.lu_solve(Mlu, (CSC + K.T @ K).T, trans=1).T, trans=1)
        rhs = 0.5 * (rhs + rhs.T)
        if np.max(np.linalg.eigvals(a).real) >= 0:
            raise AreDivergenceError("Newton iterate is not stabilizing", res, history)
        X = spla.solve_continuous_lyapunov(a, -rhs)
        X = 0.5 * (X + X.T)
        res = _residual_dense(prob, Ad, Md, CSC, X) / scale
        history.append(res)
        if trace is not None:
            trace.append({"iteration": it, "residual": res, "inner": 1})
        if not np.isfinite(res):
            break
        if res <= tol:
            return X
        if _stagnated(history, stagnation):
            logger.debug("dense Newton stagnated at residual %.3e (tol %.1e)", res, tol)
            return X if res <= history[-2] else X_prev
        if it >= 3 and res > 10 * history[-2] and res > history[1]:
            break
        X_prev = X
    raise AreDivergenceError(f"Newton did not converge (residual {res:.3e}, tol {tol:.1e})",
                             res, history)


# -- low-rank Newton-ADI -------------------------------------------------------

class _ShiftedSolver:
    """Solve ``(A^T + p M^T - U V^T) x = b`` for a fixed real shift.

    The low-rank update is handled by Sherman-Morrison-Woodbury so that only
    ``A^T + p M^T`` (sparse if the inputs are) is factorized.
    """

    def __init__(self, A, M, U, Vt, p):
        N = A.T + p * M.T
        if sps.issparse(N):
            lu = spsla.splu(sps.csc_matrix(N))
            self._solve = lu.solve
        else:
            lu = spla.lu_factor(np.asarray(N))
            self._solve = lambda b: spla.lu_solve(lu, b)
        self.U, self.Vt = U, Vt
        if U.shape[1]:
            NU = self._solve(U)
            self.NU = NU
            self.cap = np.eye(U.shape[1]) - Vt @ NU
        else:
            self.NU = None

    def __call__(self, b):
        y = self._solve(b)
        if self.NU is None:
            return y
        return y + self.NU @ np.linalg.solve(self.cap, self.Vt @ y)


def _arnoldi_ritz(apply, n, k, rng):
    k = min(k, n)
    if k <= 0:
        return np.zeros(0, dtype=complex)
    Q = np.zeros((n, k + 1))
    H = np.zeros((k + 1, k))
    v = rng.standard_normal(n)
    Q[:, 0] = v / np.linalg.norm(v)
    m = k
    for j in range(k):
        w = apply(Q[:, j])
        for i in range(j + 1):
            H[i, j] = Q[:, i] @ w
            w = w - H[i, j] * Q[:, i]
        for i in range(j + 1):  # reorthogonalize
            c = Q[:, i] @ w
            H[i, j] += c
            w = w - c * Q[:, i]
        H[j + 1, j] = np.linalg.norm(w)
        if H[j + 1, j] <= 1e-12 * max(1.0, np.abs(H[: j + 1, j]).max()):
            m = j + 1
            break
        Q[:, j + 1] = w / H[j + 1, j]
    return np.linalg.eigvals(H[:m, :m])


def penzl_shifts(candidates, count: int) -> np.ndarray:
    """Greedy min-max selection of real negative shifts from Ritz values."""
    cand = np.unique(np.round(np.real(candidates[np.real(candidates) < 0]), 14))
    if cand.size == 0:
        raise AreDivergenceError("no stable Ritz values for ADI shift selection")
    if cand.size <= count:
        return cand

    def rho(p, pts):
        return np.abs((pts - p) / (pts + p))

    best = min(cand, key=lambda p: rho(p, cand).max())
    shifts = [best]
    prod = rho(best, cand)
    while len(shifts) < count:
        i = int(np.argmax(prod))
        if prod[i] == 0:
            break
        shifts.append(cand[i])
        prod = prod * rho(cand[i], cand)
    return np.array(shifts)


def adi_shifts(A, M, U, Vt, opts: AdiOptions) -> np.ndarray:
    """Penzl heuristic shifts for the pencil ``(A^T - U V^T, M^T)``."""
    n = A.shape[0]
    rng = np.random.default_rng(opts.seed)
    Mt = M.T
    if sps.issparse(Mt):
        Mlu = spsla.splu(sps.csc_matrix(Mt))
        solve_M = Mlu.solve
    else:
        Mlu = spla.lu_factor(np.asarray(Mt))
        solve_M = lambda b: spla.lu_solve(Mlu, b)  # noqa: E731
    F0 = _ShiftedSolver(A, M, U, Vt, 0.0)

    def op(v):
        return solve_M(np.asarray(A.T @ v).ravel() - U @ (Vt @ v))

    def op_inv(v):
        return F0(np.asarray(Mt @ v).ravel())

    rp = _arnoldi_ritz(op, n, opts.arnoldi_plus, rng)
    rm = _arnoldi_ritz(op_inv, n, opts.arnoldi_minus, rng)
    rm = 1.0 / rm[np.abs(rm) > 0]
    return penzl_shifts(np.concatenate([rp, rm]), opts.n_shifts)


def _lowrank_gram_norm(W, S):
    if W.shape[1] == 0:
        return 0.0
    _, R = np.linalg.qr(W, mode="reduced")
    return float(np.linalg.norm(R @ S @ R.T))


def solve_lyapunov_adi(A, M, U, Vt, G, Sg, tol_abs, opts: AdiOptions, trace=None):
    """LDL^T low-rank ADI for ``F^T X M + M^T X F = -G Sg G^T``, ``F^T = A^T - U V^T``.

    Returns the factor and the number of ADI steps. ``tol_abs`` bounds the
    Frobenius norm of the Lyapunov residual ``W Sg W^T``.
    """
    n = A.shape[0]
    if G.shape[1] == 0:
        return LowRankFactor.zeros(n), 0
    shifts = adi_shifts(A, M, U, Vt, opts)
    solvers = {}
    W = G.copy()
    parts_L, parts_D = [], []
    res = _lowrank_gram_norm(W, Sg)
    if res <= tol_abs:
        return LowRankFactor.zeros(n), 0
    Mt = M.T
    acc = None
    for step in range(1, opts.max_steps + 1):
        p = float(shifts[(step - 1) % len(shifts)])
        if p not in solvers:
            solvers[p] = _ShiftedSolver(A, M, U, Vt, p)
        V = solvers[p](W)
        W = W - 2.0 * p * np.asarray(Mt @ V)
        parts_L.append(V)
        parts_D.append(-2.0 * p * Sg)
        if sum(x.shape[1] for x in parts_L) > max(n, 100):
            acc = compress(concat(([acc] if acc is not None else [])
                                  + [LowRankFactor(np.hstack(parts_L), spla.block_diag(*parts_D))]),
                           rel_tol=opts.compress_tol)
            parts_L, parts_D = [], []
        res = _lowrank_gram_norm(W, Sg)
        if not np.isfinite(res):
            raise AreDivergenceError("ADI produced non-finite iterates", res, trace)
        if res <= tol_abs:
            break
    else:
        raise AreDivergenceError(
            f"ADI did not converge in {opts.max_steps} steps (residual {res:.3e} > {tol_abs:.3e})",
            res, trace)
    pieces = [acc] if acc is not None else []
    if parts_L:
        pieces.append(LowRankFactor(np.hstack(parts_L), spla.block_diag(*parts_D)))
    return compress(concat(pieces), rel_tol=opts.compress_tol), step


def solve_are_lowrank(prob: AreProblem, tol: float = 1e-10, max_iter: int = 50,
                      adi_opts: AdiOptions = None, X0: LowRankFactor = None,
                      trace: list = None, scale_floor: float = 1.0,
                      stagnation: float = 0.0) -> LowRankFactor:
    """Low-rank Newton-ADI.

    The Newton iterate ``X_{j+1}`` solves the Lyapunov equation with closed
    loop ``F = A - B K_j``, ``K_j = B^T X_j M``, and right-hand side factor
    ``[C^T, K_j^T]`` with core ``blkdiag(S, I)``. The core is carried through
    ADI as is, so indefinite ``S`` needs no splitting. No ``n x n`` matrix is
    formed.
    """
    opts = adi_opts or AdiOptions()
    n, m = prob.n, prob.m
    A, M, B = prob.A, prob.M, prob.B
    scale = _scale(prob.constant_norm(), scale_floor)
    starts = [X0, None] if X0 is not None and X0.s > 0 else [None]
    last = None
    for start in starts:
        X = start if start is not None else LowRankFactor.zeros(n)
        res = are_residual(prob, X, scale_floor)
        history = [res]
        if trace is not None:
            trace.append({"iteration": 0, "residual": res, "inner": 0})
        if res <= tol:
            return X
        try:
            for it in range(1, max_iter + 1):
                if X.s:
                    K = (B.T @ X.L) @ X.D @ np.asarray((M.T @ X.L)).T
                else:
                    K = np.zeros((m, n))
                G = np.hstack([prob.C.T, K.T])
                Sg = spla.block_diag(prob.S, np.eye(m)) if m else prob.S
                # Lyapunov accuracy well below the Newton target
                tol_lyap = 0.05 * tol * scale
                X, steps = solve_lyapunov_adi(A, M, K.T, B.T, G, Sg, tol_lyap, opts, trace)
                res = are_residual(prob, X, scale_floor)
                history.append(res)
                if trace is not None:
                    trace.append({"iteration": it, "residual": res, "inner": steps})
                logger.debug("newton-adi it=%d res=%.3e adi=%d rank=%d", it, res, steps, X.s)
                if not np.isfinite(res):
                    break
                if res <= tol or _stagnated(history, stagnation):
                    return X
                if it >= 3 and res > 10 * history[-2] and res > history[1]:
                    break
            last = AreDivergenceError(
                f"Newton-ADI did not converge (residual {res:.3e}, tol {tol:.1e})", res, history)
        except AreDivergenceError as exc:
            last = exc
        except (spla.LinAlgError, RuntimeError) as exc:
            last = AreDivergenceError(f"Newton-ADI failed: {exc}", None, history)
    raise last


def solve_are(prob: AreProblem, backend: str = "auto", tol: float = 1e-10, max_iter: int = 50,
              X0: LowRankFactor = None, adi_opts: AdiOptions = None, trace=None,
              scale_floor: float = 1.0, stagnation: float = 0.0):
    if backend == "auto":
        backend = "dense" if prob.n <= 500 else "lowrank"
    if backend == "dense":
        return solve_are_dense(prob, tol=tol, max_iter=max_iter, X0=X0, trace=trace,
                               scale_floor=scale_floor, stagnation=stagnation)
    if backend == "lowrank":
        return solve_are_lowrank(prob, tol=tol, max_iter=max_iter, adi_opts=adi_opts, X0=X0,
                                 trace=trace, scale_floor=scale_floor, stagnation=stagnation)
    raise ValueError(f"unknown ARE backend {backend!r}; expected dense, lowrank, auto")
