"""Lie and Strang splitting for the non-autonomous generalized DRE.

The right-hand side is split into an affine part ``F`` and a quadratic part
``G``. The ``G`` flow is solved exactly by a small ``s x s`` linear solve on the
core of the ``L D L^T`` factor. The ``F`` flow is the variation-of-constants
formula with the propagator ``T(r, t)`` of ``Y' = Q(s) Y``,
``Q = M^{-T} (A + Mdot)^T``; its integral term is approximated by a Gauss rule.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as spla
import scipy.sparse as sps
from scipy.integrate import quad, solve_ivp
from scipy.sparse.linalg import expm_multiply

from .dre_bdf import GainTrajectory, _check_equidistant, gain_from_factor, terminal_factor
from .lowrank import LowRankFactor, compress, concat
from .sysmodel import (EvaluationError, TimeVaryingSystem, check_commutation,
                       default_commutation_samples, effective_drift, evaluate, time_reverse,
                       to_dense)

logger = logging.getLogger(__name__)


class UnsupportedProblemError(ValueError):
    """The closed-form affine flow needs commuting generators ``Q(t) Q(s) = Q(s) Q(t)``."""


class SingularStepError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    """Rule on the unit interval: ``int_0^1 f ~ sum_j w_j f(c_j)``."""

    nodes: tuple
    weights: tuple
    order: int

    def __post_init__(self):
        if len(self.nodes) != len(self.weights) or not self.nodes:
            raise ValueError("nodes and weights must be non-empty and of equal length")
        if abs(sum(self.weights) - 1.0) > 1e-13:
            raise ValueError("weights must sum to one")


def gauss_legendre(s: int) -> QuadratureRule:
    x, w = np.polynomial.legendre.leggauss(s)
    return QuadratureRule(tuple(0.5 * (x + 1.0)), tuple(0.5 * w), 2 * s)


DEFAULT_RULES = {"lie": 2, "strang": 3}


def integrate_bbt(system: TimeVaryingSystem, t0: float, t1: float,
                  rule: QuadratureRule) -> LowRankFactor:
    """Factor of ``int_{t0}^{t1} B B^T`` by the quadrature rule (weighted ``B``)."""
    n, m = system.dim, system.n_inputs
    if m == 0:
        return LowRankFactor.zeros(n)
    h = t1 - t0
    parts = []
    for c, w in zip(rule.nodes, rule.weights):
        B = evaluate(system, t0 + c * h).B
        parts.append(LowRankFactor(B, h * w * np.eye(B.shape[1])))
    return compress(concat(parts), rel_tol=1e-15)


def step_G(X: LowRankFactor, bbt: LowRankFactor) -> LowRankFactor:
    """Exact flow of ``X' = -X B B^T X``: ``D <- (I + D L^T W L)^{-1} D``."""
    if X.n != bbt.n:
        raise ValueError("dimension mismatch")
    if X.s == 0 or bbt.s == 0:
        return X
    V = X.L.T @ bbt.L
    K = V @ bbt.D @ V.T
    lhs = np.eye(X.s) + X.D @ K
    try:
        lu = spla.lu_factor(lhs)
    except spla.LinAlgError as exc:
        raise SingularStepError(f"singular G-step system, step too large: {exc}") from exc
    if np.linalg.cond(lhs) > 1e14:
        raise SingularStepError("ill-conditioned G-step system, step too large")
    D = spla.lu_solve(lu, X.D)
    return LowRankFactor(X.L, 0.5 * (D + D.T))


# -- propagator --------------------------------------------------------------------

class Semigroup:
    """Propagator ``T(r, t)`` of ``M^T Y' = (A + Mdot)^T Y``.

    ``method="scalar"`` uses the structure ``A = alpha A_bar``,
    ``M = mu M_bar``: ``T(r, t) = (mu(t)/mu(r))^o exp(theta (A_bar M_bar^{-1})^T)``
    with ``theta = int_r^t alpha/mu`` and ``o`` the time orientation.
    ``method="ode"`` integrates the linear ODE with an embedded explicit pair.
    """

    def __init__(self, system: TimeVaryingSystem, method: str = "scalar", tol: float = 1e-10):
        self.system = system
        self.method = method
        self.tol = tol
        if method == "scalar":
            ss = system.scalar_scaled
            if ss is None:
                raise ValueError("scalar semigroup needs a scalar-scaled system")
            A_bar, M_bar = ss.A_bar, ss.M_bar
            if sps.issparse(M_bar):
                G = sps.linalg.spsolve(M_bar.T.tocsc(), sps.csc_matrix(A_bar.T))
                self.G = sps.csr_matrix(G)
            else:
                self.G = spla.solve(np.asarray(M_bar).T, to_dense(A_bar).T)
            self._theta = lru_cache(maxsize=4096)(self._theta_uncached)
        elif method != "ode":
            raise ValueError(f"unknown semigroup method {method!r}; expected scalar or ode")

    def _theta_uncached(self, r, t):
        ss = self.system.scalar_scaled
        val, err = quad(lambda s: ss.alpha(s) / ss.mu(s), r, t, epsabs=0.0, epsrel=1e-12,
                        limit=200)
        return val

    def apply(self, r: float, t: float, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        if r > t:
            raise ValueError("semigroup needs r <= t")
        if r == t or V.size == 0:
            return V.copy()
        if self.method == "scalar":
            ss = self.system.scalar_scaled
            o = self.system.orientation
            mu_r, mu_t = ss.mu(r), ss.mu(t)
            if mu_r == 0 or mu_t == 0:
                raise EvaluationError("singular mass scaling")
            factor = (mu_t / mu_r) ** (1 if o >= 0 else -1)
            theta = self._theta(float(r), float(t))
            return factor * expm_multiply(theta * self.G, V)
        return self._apply_ode(r, t, V)

    def _apply_ode(self, r, t, V):
        shape = V.shape
        sysm = self.system

        def f(s, y):
            snap = evaluate(sysm, s)
            M = to_dense(snap.M)
            F = to_dense(effective_drift(snap))
            Y = y.reshape(shape)
            return spla.solve(M.T, F.T @ Y).ravel()

        scale = max(1.0, np.abs(V).max())
        sol = solve_ivp(f, (r, t), V.ravel(), method="DOP853", rtol=self.tol,
                        atol=self.tol * scale)
        if not sol.success:
            raise EvaluationError(f"semigroup integration failed: {sol.message}")
        return sol.y[:, -1].reshape(shape)


def apply_semigroup(system: TimeVaryingSystem, r: float, t: float, V, method: str = "auto",
                    tol: float = 1e-10) -> np.ndarray:
    """``T(r, t) V`` for the affine subproblem (see :class:`Semigroup`)."""
    if method == "auto":
        method = "scalar" if system.scalar_scaled is not None else "ode"
    return Semigroup(system, method, tol).apply(r, t, V)


def _mt_solve(snap, C):
    M = snap.M
    if sps.issparse(M):
        return np.asarray(sps.linalg.spsolve(M.T.tocsc(), C.T)).reshape(M.shape[0], -1)
    return spla.solve(to_dense(M).T, C.T)


def step_F(system: TimeVaryingSystem, X: LowRankFactor, t0: float, t1: float,
           rule: QuadratureRule, semigroup: Semigroup = None,
           compress_tol: float = 1e-14) -> LowRankFactor:
    """Affine flow from ``t0`` to ``t1`` with a quadrature for the integral term."""
    sg = semigroup or Semigroup(system, "scalar" if system.scalar_scaled else "ode")
    h = t1 - t0
    parts = []
    if X.s:
        parts.append(LowRankFactor(sg.apply(t0, t1, X.L), X.D))
    for c, w in zip(rule.nodes, rule.weights):
        s = t0 + c * h
        snap = evaluate(system, s)
        if snap.C.shape[0] == 0 or not np.any(snap.C):
            continue
        V = _mt_solve(snap, snap.C)
        parts.append(LowRankFactor(sg.apply(s, t1, V), h * w * np.eye(V.shape[1])))
    if not parts:
        return LowRankFactor.zeros(X.n)
    return compress(concat(parts), rel_tol=compress_tol)


def solve_dre_splitting(system: TimeVaryingSystem, grid, variant: str = "strang",
                        rule: QuadratureRule = None, semigroup: str = "auto",
                        commutation_tol: float = 1e-12, override: bool = False,
                        ode_tol: float = 1e-10, compress_tol: float = 1e-14,
                        X_terminal: LowRankFactor = None,
                        keep_factors: str = "none") -> GainTrajectory:
    """Integrate the DRE backwards with Lie (order 1) or Strang (order 2) splitting.

    Parameters
    ----------
    variant
        ``"lie"``: ``G`` then ``F`` per step. ``"strang"``: half ``F``, full
        ``G``, half ``F``.
    rule
        Gauss rule for the integrals (defaults: 2 nodes for Lie, 3 for Strang).
    semigroup
        ``"auto"`` picks the closed form for scalar-scaled systems and checks
        the commutation condition otherwise; ``"ode"`` forces the numerical
        propagator, which is flagged experimental for non-commuting data.
    override
        Proceed with the numerical propagator although the commutation check
        failed.
    """
    if variant not in DEFAULT_RULES:
        raise ValueError(f"unknown splitting variant {variant!r}; expected lie or strang")
    if keep_factors not in ("none", "final", "all"):
        raise ValueError("keep_factors must be none, final or all")
    rule = rule or gauss_legendre(DEFAULT_RULES[variant])
    grid, tau = _check_equidistant(grid)
    if not (np.isclose(grid[0], system.t0) and np.isclose(grid[-1], system.t_end)):
        raise ValueError("grid must span the system horizon")
    experimental = False
    if semigroup == "auto":
        if system.scalar_scaled is not None:
            method = "scalar"
        else:
            ok, viol = check_commutation(system, default_commutation_samples(system),
                                         commutation_tol)
            if not ok and not override:
                raise UnsupportedProblemError(
                    "splitting requires commuting generators Q(t)Q(s) = Q(s)Q(t) with "
                    f"Q = ((A + Mdot) M^-1)^T; violation {viol:.3e}. Use semigroup='ode' "
                    "or override=True to run the experimental numerical propagator.")
            method = "ode"
            experimental = not ok
    elif semigroup in ("scalar", "ode"):
        method = semigroup
        if method == "ode" and system.scalar_scaled is None:
            ok, _ = check_commutation(system, default_commutation_samples(system),
                                      commutation_tol)
            experimental = not ok
    else:
        raise ValueError(f"unknown semigroup backend {semigroup!r}")
    rev = time_reverse(system)
    sg = Semigroup(rev, method, ode_tol)
    n_t = len(grid) - 1
    X = terminal_factor(system) if X_terminal is None else X_terminal
    s_grid = grid  # reversed time uses the same numbers
    gains = [None] * (n_t + 1)
    factors = {}
    ranks = []

    def emit(j, X):
        k = n_t - j
        snap = evaluate(rev, s_grid[j])
        gains[k] = gain_from_factor(snap, X, system.lam)
        if keep_factors == "all" or (keep_factors == "final" and k == 0):
            factors[k] = X
        ranks.append((float(grid[k]), X.s))

    emit(0, X)
    for j in range(n_t):
        a, b = s_grid[j], s_grid[j + 1]
        if variant == "lie":
            X = step_G(X, integrate_bbt(rev, a, b, rule))
            X = step_F(rev, X, a, b, rule, sg, compress_tol)
        else:
            mid = 0.5 * (a + b)
            X = step_F(rev, X, a, mid, rule, sg, compress_tol)
            X = step_G(X, integrate_bbt(rev, a, b, rule))
            X = step_F(rev, X, mid, b, rule, sg, compress_tol)
        emit(j + 1, X)
    meta = {"solver": "splitting", "variant": variant, "rule_nodes": len(rule.nodes),
            "rule_order": rule.order, "semigroup": method, "experimental": experimental,
            "n_t": n_t, "lam": system.lam, "ranks": ranks}
    return GainTrajectory(grid, gains, factors, meta)
