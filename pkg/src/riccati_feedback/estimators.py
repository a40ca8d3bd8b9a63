"""Estimator-style wrappers around the DRE solvers and the closed-loop simulator.

``fit`` takes the problem (a :class:`TimeVaryingSystem` or a
:class:`ClosedLoopSystem`) in place of training data; hyperparameters are
constructor arguments so that ``get_params``/``set_params``/``clone`` work as
usual.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .adapt import AdaptiveConfig
from .closedloop import SimulationResult, interp_gain, performance_index, simulate
from .dre_bdf import GainTrajectory, solve_dre_bdf
from .dre_ref import reference_gain, solve_reference
from .dre_split import solve_dre_splitting


class RiccatiFeedback(BaseEstimator):
    """Time-varying LQR gain from a DRE solve.

    Parameters
    ----------
    solver : {"bdf", "splitting", "reference"}
    p : int
        BDF order.
    variant : {"lie", "strang"}
        Splitting variant.
    n_t : int
        Number of steps on the equidistant grid.
    n_ord : int
        Start-up refinement for BDF orders 3 and 4.
    """

    def __init__(self, solver="bdf", p=1, variant="strang", n_t=128, n_ord=10,
                 are_backend="auto", tol=1e-13, rel_tol=1e-10, abs_tol=1e-20):
        self.solver = solver
        self.p = p
        self.variant = variant
        self.n_t = n_t
        self.n_ord = n_ord
        self.are_backend = are_backend
        self.tol = tol
        self.rel_tol = rel_tol
        self.abs_tol = abs_tol

    def fit(self, system, y=None):
        grid = np.linspace(system.t0, system.t_end, self.n_t + 1)
        if self.solver == "bdf":
            traj = solve_dre_bdf(system, grid, p=self.p, n_ord=self.n_ord,
                                 are_backend=self.are_backend, tol=self.tol)
        elif self.solver == "splitting":
            traj = solve_dre_splitting(system, grid, variant=self.variant)
        elif self.solver == "reference":
            dense = solve_reference(system, grid, rel_tol=self.rel_tol, abs_tol=self.abs_tol)
            gains = [reference_gain(system, t, X) for t, X in zip(dense.times, dense.X)]
            traj = GainTrajectory(grid, gains, {}, {"solver": "reference"})
        else:
            raise ValueError(f"unknown solver {self.solver!r}; expected bdf, splitting or reference")
        self.gains_ = traj
        self.system_ = system
        return self

    def gain(self, t):
        check_is_fitted(self, "gains_")
        return interp_gain(self.gains_, t)

    def predict(self, t, x):
        """Feedback control ``u = -K(t) x`` for a deviation state ``x``."""
        return -self.gain(t) @ np.asarray(x, dtype=float)


class ClosedLoopSimulator(BaseEstimator):
    """Closed-loop simulation under a fitted :class:`RiccatiFeedback`.

    ``adaptive=True`` (FT only) builds an :class:`AdaptiveConfig` from
    ``indicator``, ``TOL``, ``tau_min`` and ``tau_max``.
    """

    def __init__(self, scheme="FT", coupling="implicit", adaptive=False,
                 indicator="control_scaled", TOL=1e-2, tau_min=1e-4, tau_max=2.5e-3):
        self.scheme = scheme
        self.coupling = coupling
        self.adaptive = adaptive
        self.indicator = indicator
        self.TOL = TOL
        self.tau_min = tau_min
        self.tau_max = tau_max

    def fit(self, closed_loop, feedback, grid_ref=None):
        gains = feedback.gains_ if isinstance(feedback, RiccatiFeedback) else feedback
        cfg = None
        if self.adaptive:
            cfg = AdaptiveConfig(indicator=self.indicator, TOL=self.TOL,
                                 tau_min=self.tau_min, tau_max=self.tau_max)
        self.result_: SimulationResult = simulate(closed_loop, gains, self.scheme, grid_ref,
                                                  adaptivity=cfg, coupling=self.coupling)
        self.system_ = closed_loop
        return self

    def score(self, closed_loop=None, y=None):
        """Negative performance index (larger is better)."""
        check_is_fitted(self, "result_")
        return -performance_index(self.result_, closed_loop or self.system_)
