"""Dense reference solutions of the DRE and error metrics.

The lower triangle of ``X`` is packed into a vector and the DRE is integrated
backwards in original time with an adaptive explicit Runge-Kutta pair. This
is only meant for small verification problems.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as spla
from scipy.integrate import solve_ivp

from .lowrank import GuardError, LowRankFactor, densify
from .sysmodel import TimeVaryingSystem, effective_drift, evaluate, to_dense

MAX_DIM = 60


class StiffnessError(RuntimeError):
    pass


@dataclass
class DenseTrajectory:
    times: np.ndarray
    X: list

    def at(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[i], t, rtol=0, atol=1e-12 * max(1.0, abs(t))):
            raise KeyError(f"no reference sample at t={t}")
        return self.X[i]

    def to_csv(self, path):
        """One row per time: ``t`` followed by the packed lower triangle."""
        n = self.X[0].shape[0]
        il = np.tril_indices(n)
        header = "t," + ",".join(f"x_{i}_{j}" for i, j in zip(*il))
        rows = np.array([np.concatenate([[t], X[il]]) for t, X in zip(self.times, self.X)])
        np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt="%.17g")


def _pack(X, il):
    return X[il]


def _unpack(v, n, il):
    X = np.zeros((n, n))
    X[il] = v
    return X + np.tril(X, -1).T


def dre_rhs(system: TimeVaryingSystem, t: float, X: np.ndarray) -> np.ndarray:
    """``dX/dt`` of the DRE in original time (the equation runs backwards)."""
    snap = evaluate(system, t)
    M = to_dense(snap.M)
    F = to_dense(effective_drift(snap))
    C = snap.C
    XM = X @ M
    BtXM = snap.B.T @ XM
    rhs = C.T @ C + F.T @ XM + XM.T @ F - BtXM.T @ BtXM
    lu = spla.lu_factor(M)
    Y = spla.lu_solve(lu, spla.lu_solve(lu, rhs, trans=1).T, trans=1)
    return -0.5 * (Y + Y.T)


def solve_reference(system: TimeVaryingSystem, output_times, rel_tol: float = 1e-10,
                    abs_tol: float = 1e-12, X_terminal=None) -> DenseTrajectory:
    """Integrate the symmetric-packed DRE from ``t_end`` down to ``t0``.

    Parameters
    ----------
    output_times
        Sample times within the horizon (any order).
    rel_tol, abs_tol
        Local error tolerances of the embedded eighth-order pair.
    """
    n = system.dim
    if n > MAX_DIM:
        raise GuardError(f"reference solver limited to n <= {MAX_DIM} (got {n})")
    il = np.tril_indices(n)
    if X_terminal is None:
        S = to_dense(system.S)
        M = to_dense(evaluate(system, system.t_end).M)
        lu = spla.lu_factor(M)
        X_terminal = spla.lu_solve(lu, spla.lu_solve(lu, S, trans=1).T, trans=1)
    X_terminal = 0.5 * (X_terminal + X_terminal.T)
    times = np.asarray(output_times, dtype=float)
    order = np.argsort(-times)
    t_eval = times[order]

    def f(t, v):
        return _pack(dre_rhs(system, t, _unpack(v, n, il)), il)

    sol = solve_ivp(f, (system.t_end, system.t0), _pack(X_terminal, il), method="DOP853",
                    t_eval=t_eval, rtol=rel_tol, atol=abs_tol)
    if not sol.success:
        raise StiffnessError(f"reference integration failed ({sol.message}); "
                             "try a shorter horizon or a looser tolerance")
    Xs = [None] * len(times)
    for col, idx in enumerate(order):
        Xs[idx] = _unpack(sol.y[:, col], n, il)
    return DenseTrajectory(times, Xs)


def e_dre(X, X_ref: np.ndarray) -> float:
    """Relative spectral-norm error ``||X - X_ref||_2 / ||X_ref||_2``."""
    nref = np.linalg.norm(X_ref, 2)
    if nref == 0:
        raise ZeroDivisionError("reference solution has zero norm")
    Xd = densify(X) if isinstance(X, LowRankFactor) else np.asarray(X)
    return float(np.linalg.norm(Xd - X_ref, 2) / nref)


def e_gain(K: np.ndarray, K_ref: np.ndarray) -> float:
    """Relative spectral-norm gain error."""
    nref = np.linalg.norm(K_ref, 2)
    if nref == 0:
        raise ZeroDivisionError("reference gain has zero norm")
    return float(np.linalg.norm(np.asarray(K) - K_ref, 2) / nref)


def reference_gain(system: TimeVaryingSystem, t: float, X: np.ndarray) -> np.ndarray:
    snap = evaluate(system, t)
    return snap.B.T @ X @ to_dense(snap.M) / np.sqrt(system.lam)
