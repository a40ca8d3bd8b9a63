"""Low-rank BDF integration of the non-autonomous generalized DRE.

The solver works in reversed time, where the equation reads

    M^T X' M = C^T C + F^T X M + M^T X F - M^T X B B^T X M,
    F = A + Mdot (drift of the original equation),

and every implicit step reduces to one algebraic Riccati equation in
``L D L^T`` form. Orders three and four start from a self-contained wind-up
on geometrically growing sub-steps (see :func:`startup_grid`).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as spla

from .are import AreDivergenceError, AreProblem, solve_are
from .lowrank import LowRankFactor, compress, from_dense
from .sysmodel import (TimeVaryingSystem, effective_drift, evaluate, time_reverse,
                       to_dense)

logger = logging.getLogger(__name__)


class StepFailure(RuntimeError):
    """A DRE time step failed; carries the step context and partial output."""

    def __init__(self, message, t=None, tau=None, order=None, partial=None):
        super().__init__(message)
        self.t, self.tau, self.order, self.partial = t, tau, order, partial


@dataclass(frozen=True)
class BdfScheme:
    """Coefficients of ``x_k + sum_j alpha_j x_{k-j} = tau beta f_k``."""

    order: int
    beta: float
    alphas: tuple


_BDF = {
    1: (1.0, (-1.0,)),
    2: (2.0 / 3.0, (-4.0 / 3.0, 1.0 / 3.0)),
    3: (6.0 / 11.0, (-18.0 / 11.0, 9.0 / 11.0, -2.0 / 11.0)),
    4: (12.0 / 25.0, (-48.0 / 25.0, 36.0 / 25.0, -16.0 / 25.0, 3.0 / 25.0)),
}


def bdf_coefficients(p: int) -> BdfScheme:
    if p not in _BDF:
        raise ValueError(f"unsupported BDF order {p}; valid orders are 1, 2, 3, 4")
    beta, alphas = _BDF[p]
    return BdfScheme(p, beta, alphas)


# -- trajectory container --------------------------------------------------------

@dataclass
class GainTrajectory:
    """Feedback gains ``K_k`` (``m x n``) on an ascending time grid.

    ``factors`` optionally maps grid indices to solution factors of the DRE.
    """

    grid: np.ndarray
    gains: list
    factors: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if len(self.gains) != len(self.grid):
            raise ValueError(f"{len(self.gains)} gains for {len(self.grid)} grid points")
        for K in self.gains:
            if not np.all(np.isfinite(K)):
                raise ValueError("non-finite gain matrix")

    def __len__(self):
        return len(self.grid)

    @property
    def shape(self):
        return self.gains[0].shape

    def factor_at(self, k: int) -> LowRankFactor:
        if k < 0:
            k += len(self.grid)
        if k not in self.factors:
            raise KeyError(f"no solution factor stored for grid index {k}")
        return self.factors[k]

    def save(self, directory, provenance: dict = None):
        """Write ``index.json`` plus one CSV file per gain matrix."""
        d = Path(directory)
        (d / "gains").mkdir(parents=True, exist_ok=True)
        files = []
        header = ",".join(f"x_{j}" for j in range(self.shape[1]))
        for k, K in enumerate(self.gains):
            name = f"gains/K_{k:05d}.csv"
            np.savetxt(d / name, K, delimiter=",", fmt="%.17g", header=header, comments="")
            if provenance:
                side = {**provenance, "file": name, "t": float(self.grid[k])}
                (d / (name + ".provenance.json")).write_text(json.dumps(side, sort_keys=True))
            files.append(name)
        index = {
            "grid": [float(t) for t in self.grid],
            "m": int(self.shape[0]), "n": int(self.shape[1]),
            "files": files,
            "metadata": _jsonable(self.metadata),
        }
        if provenance:
            index["provenance"] = provenance
        (d / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
        if self.factors:
            from .sysmodel import save_matrix_market
            fdir = d / "factors"
            fdir.mkdir(exist_ok=True)
            for k, f in sorted(self.factors.items()):
                save_matrix_market(fdir / f"L_{k:05d}.mtx", f.L)
                save_matrix_market(fdir / f"D_{k:05d}.mtx", f.D)
                (fdir / f"meta_{k:05d}.json").write_text(
                    json.dumps({"n": f.n, "s": f.s, "t": float(self.grid[k])}))
        return d

    @classmethod
    def load(cls, directory) -> "GainTrajectory":
        d = Path(directory)
        index = json.loads((d / "index.json").read_text())
        m, n = index["m"], index["n"]
        gains = [np.loadtxt(d / f, delimiter=",", ndmin=2, skiprows=1).reshape(m, n)
                 for f in index["files"]]
        return cls(np.array(index["grid"]), gains, metadata=index.get("metadata", {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


# -- start-up --------------------------------------------------------------------

def _check_equidistant(grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("grid needs at least two points")
    h = np.diff(grid)
    if np.any(h <= 0):
        raise ValueError("grid must be strictly increasing")
    if np.max(np.abs(h - h[0])) > 1e-9 * abs(h[0]):
        raise ValueError("grid must be equidistant")
    return grid, float(h[0])


def _startup(grid, p, n_ord):
    bdf_coefficients(p)
    grid, tau = _check_equidistant(grid)
    if len(grid) < p + 1:
        raise ValueError(f"grid needs at least p+1={p + 1} points")
    if n_ord < 0:
        raise ValueError("n_ord must be non-negative")
    t0 = grid[0]
    if p <= 2:
        aug = grid.copy()
        units = np.arange(len(grid), dtype=float)
        scale = tau
    else:
        tt = math.ldexp(tau, -n_ord)
        if tt <= 0 or tt < 1e-14 * max(1.0, abs(t0)) or not math.isfinite(tt):
            raise ValueError(f"n_ord={n_ord} makes the smallest wind-up step underflow")
        # work in integer units of tt to merge points exactly
        unit = 2 ** n_ord
        pts = {0, 1}
        if p == 3:
            pts |= {2 ** (k - 1) for k in range(2, n_ord + 3)}
            cut = 2 * unit
        else:
            for k in range(1, n_ord + 3):
                pts.add(2 ** k)
                pts.add(3 * 2 ** (k - 1))
            cut = 4 * unit
        pts = {q for q in pts if q <= cut}
        pts |= {j * unit for j in range(len(grid))}
        units = np.array(sorted(pts), dtype=float)
        scale = tt
        aug = t0 + units * scale
        # exact original points where they coincide
        idx = np.rint(units / unit).astype(int)
        on_grid = np.isclose(units, idx * unit)
        aug[on_grid] = grid[idx[on_grid]]
    known = set()
    orders = []
    ulist = [int(round(u)) for u in units]
    known.add(ulist[0])
    for i in range(1, len(ulist)):
        h = ulist[i] - ulist[i - 1]
        q = 1
        while q < p and (ulist[i] - (q + 1) * h) in known:
            q += 1
        orders.append(q)
        known.add(ulist[i])
    return aug, orders, ulist


def startup_grid(grid, p: int, n_ord: int = 10):
    """Augment an equidistant grid with the wind-up points for orders 3 and 4.

    Returns ``(augmented, orders)`` where ``orders[i]`` is the BDF order used
    for the step ending at ``augmented[i + 1]``. The order of each step is the
    highest ``q <= p`` for which the ``q`` previous points at the step's own
    spacing are already available.

    For ``p = 3`` the points ``t0 + 2^j tt`` with ``tt = tau / 2^n_ord`` are
    inserted below ``t_2``; for ``p = 4`` the points ``t0 + 2^j tt`` and
    ``t0 + 3 * 2^(j-1) tt`` are inserted below ``t_4``. Duplicates with the
    original grid are merged, which yields ``n_ord`` extra steps for order 3
    and ``2 n_ord`` extra steps for order 4.
    """
    aug, orders, _ = _startup(grid, p, n_ord)
    return aug, orders


def _history_offsets(units, orders):
    """Indices of the history points used by each step."""
    pos = {u: i for i, u in enumerate(units)}
    uses = []
    for i, q in enumerate(orders, start=1):
        h = units[i] - units[i - 1]
        uses.append([pos[units[i] - j * h] for j in range(1, q + 1)])
    return uses


# -- single step ---------------------------------------------------------------

def terminal_factor(system: TimeVaryingSystem, t=None, rel_tol=1e-12) -> LowRankFactor:
    """Factor of ``X`` with ``M^T X M = S`` at ``t`` (default ``t_end``)."""
    t = system.t_end if t is None else t
    S = to_dense(system.S)
    if not np.any(S):
        return LowRankFactor.zeros(system.dim)
    M = to_dense(evaluate(system, t).M)
    lu = spla.lu_factor(M)
    Y = spla.lu_solve(lu, spla.lu_solve(lu, S, trans=1).T, trans=1)
    return from_dense(Y, rel_tol=rel_tol)


def assemble_step(snap, scheme: BdfScheme, tau: float, history):
    """Matrices of the ARE that one BDF step has to solve."""
    p = scheme.order
    if len(history) < p:
        raise ValueError(f"BDF{p} step needs {p} history factors, got {len(history)}")
    tb = tau * scheme.beta
    M = snap.M
    A_k = tb * effective_drift(snap) - 0.5 * M
    B_k = math.sqrt(tb) * snap.B
    C = np.atleast_2d(snap.C)
    blocks = [C]
    cores = [tb * np.eye(C.shape[0])]
    for j in range(p):
        f = history[j]
        if f.s == 0:
            continue
        blocks.append(np.asarray(M.T @ f.L).T)
        cores.append(-scheme.alphas[j] * f.D)
    C_k = np.vstack(blocks)
    S_k = spla.block_diag(*cores)
    return AreProblem(A_k, M, B_k, C_k, S_k)


def bdf_step(system: TimeVaryingSystem, scheme: BdfScheme, t_k: float, tau: float, history,
             are_backend: str = "auto", tol: float = 1e-13, X0: LowRankFactor = None,
             compress_tol: float = 1e-12, trace=None,
             scale_floor: float = 0.0, stagnation: float = 1e-10) -> LowRankFactor:
    """One BDF step ending at ``t_k`` with ``history`` ordered newest first.

    The ``system`` is interpreted in the forward (already reversed) time.
    ``tol`` bounds the ARE residual relative to ``max(scale_floor,
    ||C_k^T S_k C_k||_F)``; the default floor ``0`` makes it scale invariant.
    """
    snap = evaluate(system, t_k)
    prob = assemble_step(snap, scheme, tau, history)
    try:
        X = solve_are(prob, backend=are_backend, tol=tol,
                      X0=X0 if X0 is not None else history[0], trace=trace,
                      scale_floor=scale_floor, stagnation=stagnation)
    except AreDivergenceError as exc:
        raise StepFailure(f"ARE failed in BDF{scheme.order} step at t={t_k:.6g}, "
                          f"tau={tau:.3g}: {exc}", t_k, tau, scheme.order) from exc
    return compress(X, rel_tol=compress_tol)


def gain_from_factor(snap, X: LowRankFactor, lam: float) -> np.ndarray:
    """``K = lam^{-1/2} B^T L D L^T M`` (``B`` already weighted)."""
    m, n = snap.B.shape[1], X.n
    if X.s == 0:
        return np.zeros((m, n))
    BtL = snap.B.T @ X.L
    LtM = np.asarray(snap.M.T @ X.L).T
    return (BtL @ X.D @ LtM) / math.sqrt(lam)


# -- driver --------------------------------------------------------------------

def solve_dre_bdf(system: TimeVaryingSystem, grid, p: int = 1, n_ord: int = 10,
                  X_terminal: LowRankFactor = None, are_backend: str = "auto",
                  tol: float = 1e-13, compress_tol: float = 1e-12,
                  keep_factors: str = "none", scale_floor: float = 0.0) -> GainTrajectory:
    """Integrate the DRE backwards over ``grid`` with BDF of order ``p``.

    Parameters
    ----------
    system
        The DRE in original time.
    grid
        Equidistant original time grid from ``t0`` to ``t_end``.
    p
        BDF order in ``{1, 2, 3, 4}``.
    n_ord
        Number of step doublings in the wind-up for ``p >= 3``.
    X_terminal
        Factor of ``X(t_end)``; computed from ``S`` when omitted.
    keep_factors
        ``"none"``, ``"final"`` (factor at ``t0`` only) or ``"all"``.

    Returns
    -------
    GainTrajectory
        Gains at every original grid point, in ascending original time.
    """
    scheme = bdf_coefficients(p)
    if keep_factors not in ("none", "final", "all"):
        raise ValueError("keep_factors must be none, final or all")
    grid, tau = _check_equidistant(grid)
    if not (np.isclose(grid[0], system.t0) and np.isclose(grid[-1], system.t_end)):
        raise ValueError("grid must span the system horizon")
    n_t = len(grid) - 1
    rev = time_reverse(system)
    if X_terminal is None:
        X_terminal = terminal_factor(system)
    aug, orders, units = _startup(grid, p, n_ord)
    uses = _history_offsets(units, orders)
    last_use = {}
    for i, idx in enumerate(uses, start=1):
        for j in idx:
            last_use[j] = i
    # map augmented index -> original grid index (reversed numbering)
    orig_index = {}
    for i, s in enumerate(aug):
        j = int(round((s - grid[0]) / tau))
        if abs(grid[0] + j * tau - s) <= 1e-9 * tau:
            orig_index[i] = j
    n = system.dim
    m = system.n_inputs
    gains = [None] * (n_t + 1)
    factors = {}
    ranks = []
    store = {0: X_terminal}
    peak_main = 1
    main_start = next(i for i in orig_index if orig_index[i] == p) if p <= n_t else len(aug)

    def emit(i, X):
        j = orig_index.get(i)
        if j is None:
            return
        k = n_t - j  # original time index
        snap = evaluate(rev, aug[i])
        gains[k] = gain_from_factor(snap, X, system.lam)
        if keep_factors == "all" or (keep_factors == "final" and k == 0):
            factors[k] = X
        ranks.append((float(grid[k]), X.s))

    emit(0, X_terminal)
    for i in range(1, len(aug)):
        q = orders[i - 1]
        h = aug[i] - aug[i - 1]
        hist = [store[j] for j in uses[i - 1]]
        try:
            X = bdf_step(rev, bdf_coefficients(q), aug[i], h, hist, are_backend, tol,
                         compress_tol=compress_tol, scale_floor=scale_floor)
        except StepFailure as exc:
            exc.partial = {"completed_steps": i - 1, "gains": gains}
            raise
        store[i] = X
        emit(i, X)
        if i >= main_start:
            peak_main = max(peak_main, len(store))
        for j in [j for j in store if last_use.get(j, -1) <= i and j != i]:
            del store[j]
    meta = {"solver": "bdf", "p": p, "n_ord": n_ord, "tol": tol, "lam": system.lam,
            "n_t": n_t, "extra_steps": len(aug) - len(grid), "are_backend": are_backend,
            "peak_history": peak_main, "ranks": ranks,
            "mdot_fd": bool(system.metadata.get("mdot_fd", False))}
    logger.info("BDF%d finished: %d steps (%d wind-up)", p, len(aug) - 1, len(aug) - len(grid))
    return GainTrajectory(grid, gains, factors, meta)
