"""Closed-loop simulation under time-varying Riccati feedback.

The (possibly nonlinear) semi-discrete system ``x' = f(t, x, u)`` is driven
by ``u = u_ref - K(t) (x - x_ref)``. Time stepping uses theta schemes:
implicit Euler (``Theta = 1``), the trapezoidal rule (``Theta = 1/2``) and the
fractional-step-theta scheme, which chains three theta sub-steps. The FT
scheme can run with adaptive step sizes (see :mod:`riccati_feedback.adapt`).
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spsla

from .adapt import (AdaptiveConfig, adapt_decision, indicator_control_abs,
                    indicator_control_scaled, indicator_error)

logger = logging.getLogger(__name__)

FT_THETA = 2.0 - math.sqrt(2.0)
FT_BETA = 1.0 - math.sqrt(0.5)


class NewtonFailure(RuntimeError):
    pass


class GainRangeError(ValueError):
    """Gain requested outside the time span of the gain trajectory."""


class UndefinedIndexError(ValueError):
    pass


@dataclass
class ClosedLoopSystem:
    """Semi-discrete closed-loop problem in deviation form.

    Parameters
    ----------
    rhs
        ``f(t, x, u) -> n``-vector.
    input_map
        ``t -> n x m``, the derivative of ``f`` with respect to ``u``.
    rhs_jacobian
        Optional ``(t, x, u) -> n x n`` (dense or sparse) derivative with
        respect to ``x``; finite differences are used otherwise.
    x_ref, u_ref
        Optional reference callables; zero by default.
    """

    dim: int
    n_inputs: int
    rhs: Callable
    input_map: Callable
    rhs_jacobian: Optional[Callable] = None
    x0: Optional[np.ndarray] = None
    t0: float = 0.0
    t_end: float = 1.0
    C: Optional[np.ndarray] = None
    lam: float = 1.0
    S: Optional[np.ndarray] = None
    x_ref: Optional[Callable] = None
    u_ref: Optional[Callable] = None
    perturbation: Optional[Callable] = None
    name: str = "closed_loop"

    def __post_init__(self):
        if self.x0 is None:
            self.x0 = np.zeros(self.dim)
        self.x0 = np.asarray(self.x0, dtype=float)

    def xr(self, t):
        return np.zeros(self.dim) if self.x_ref is None else np.asarray(self.x_ref(t))

    def ur(self, t):
        return np.zeros(self.n_inputs) if self.u_ref is None else np.asarray(self.u_ref(t))


@dataclass(frozen=True)
class ThetaScheme:
    name: str
    thetas: tuple
    fractions: tuple

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-14:
            raise ValueError("sub-step fractions must sum to one")
        if any(not 0 <= th <= 1 for th in self.thetas):
            raise ValueError("Theta must lie in [0, 1]")


SCHEMES = {
    "IE": ThetaScheme("IE", (1.0,), (1.0,)),
    "TR": ThetaScheme("TR", (0.5,), (1.0,)),
    "FT": ThetaScheme("FT", (FT_THETA, 1.0 - FT_THETA, FT_THETA),
                      (FT_BETA, 1.0 - 2.0 * FT_BETA, FT_BETA)),
}


def get_scheme(name) -> ThetaScheme:
    if isinstance(name, ThetaScheme):
        return name
    try:
        return SCHEMES[name.upper()]
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}; expected IE, TR or FT") from None


@dataclass
class NewtonOptions:
    max_iter: int = 20
    rtol: float = 1e-10
    atol: float = 1e-12
    fd_step: float = 1e-7


class GainInterpolator:
    """Linear interpolation of a gain trajectory with range instrumentation."""

    def __init__(self, gains):
        self.grid = np.asarray(gains.grid, dtype=float)
        self.K = np.asarray(gains.gains, dtype=float)
        self.calls = 0
        self.out_of_range = 0

    def __call__(self, t):
        self.calls += 1
        return interp_gain_arrays(self.grid, self.K, t, self)


def interp_gain_arrays(grid, K, t, counter=None):
    span = grid[-1] - grid[0]
    tol = 1e-12 * max(1.0, abs(span))
    if t < grid[0] - tol or t > grid[-1] + tol:
        if counter is not None:
            counter.out_of_range += 1
        raise GainRangeError(f"t={t} outside gain grid [{grid[0]}, {grid[-1]}]")
    t = min(max(t, grid[0]), grid[-1])
    i = int(np.searchsorted(grid, t, side="right")) - 1
    i = min(max(i, 0), len(grid) - 2)
    t0, t1 = grid[i], grid[i + 1]
    if t == t0:
        return K[i].copy()
    if t == t1:
        return K[i + 1].copy()
    w = (t - t0) / (t1 - t0)
    return (1.0 - w) * K[i] + w * K[i + 1]


def interp_gain(gains, t: float) -> np.ndarray:
    """Gain at ``t``: exact at grid points, linear in between."""
    if isinstance(gains, GainInterpolator):
        return gains(t)
    return interp_gain_arrays(np.asarray(gains.grid), np.asarray(gains.gains), t)


def _gain_fn(gains):
    if isinstance(gains, GainInterpolator) or callable(gains) and not hasattr(gains, "grid"):
        return gains
    return GainInterpolator(gains)


def _control(sys, K, t, x):
    return sys.ur(t) - K @ (x - sys.xr(t))


def _jac_x(sys, t, x, u, opts):
    if sys.rhs_jacobian is not None:
        return sys.rhs_jacobian(t, x, u)
    f0 = sys.rhs(t, x, u)
    J = np.empty((sys.dim, sys.dim))
    for j in range(sys.dim):
        h = opts.fd_step * max(1.0, abs(x[j]))
        xp = x.copy()
        xp[j] += h
        J[:, j] = (sys.rhs(t, xp, u) - f0) / h
    return J


def theta_step(sys: ClosedLoopSystem, gains, x_prev, t_prev: float, tau: float,
               Theta: float, newton_opts: NewtonOptions = None, coupling: str = "implicit",
               u_prev=None):
    """One theta step ``(x_k - x_{k-1})/tau = Theta f_k + (1 - Theta) f_{k-1}``.

    With ``coupling="implicit"`` the control ``u_k = -K(t_k) x_k`` is part of
    the unknown. With ``coupling="lagged"`` the control
    ``u* = -K(t_{k-1}) x_{k-1}`` is held over the step in both terms.
    Returns ``(x_k, u_k)`` with ``u_k = -K(t_k) x_k``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not 0 <= Theta <= 1:
        raise ValueError("Theta must lie in [0, 1]")
    if coupling not in ("implicit", "lagged"):
        raise ValueError("coupling must be implicit or lagged")
    opts = newton_opts or NewtonOptions()
    gk = _gain_fn(gains)
    t = t_prev + tau
    x_prev = np.asarray(x_prev, dtype=float)
    K_prev = gk(t_prev)
    if u_prev is None:
        u_prev = _control(sys, K_prev, t_prev, x_prev)
    K = gk(t)
    if coupling == "lagged":
        u_hold = u_prev
        f_old = sys.rhs(t_prev, x_prev, u_hold)
    else:
        f_old = sys.rhs(t_prev, x_prev, u_prev)
    x = x_prev.copy()
    B = sys.input_map(t)
    for it in range(opts.max_iter):
        u = u_hold if coupling == "lagged" else _control(sys, K, t, x)
        R = x - x_prev - tau * (Theta * sys.rhs(t, x, u) + (1.0 - Theta) * f_old)
        if not np.all(np.isfinite(R)):
            raise NewtonFailure("non-finite residual in theta step")
        Jx = _jac_x(sys, t, x, u, opts)
        if coupling == "lagged" and sps.issparse(Jx):
            J = (sps.identity(sys.dim, format="csc") - tau * Theta * Jx).tocsc()
            dx = spsla.spsolve(J, R)
        else:
            Jd = Jx.toarray() if sps.issparse(Jx) else np.asarray(Jx)
            if coupling == "implicit":
                Jd = Jd - np.asarray(B) @ K
            J = np.eye(sys.dim) - tau * Theta * Jd
            try:
                dx = np.linalg.solve(J, R)
            except np.linalg.LinAlgError as exc:
                raise NewtonFailure(f"singular Newton matrix: {exc}") from exc
        x = x - dx
        if not np.all(np.isfinite(x)):
            raise NewtonFailure("non-finite Newton iterate")
        if np.linalg.norm(dx) <= opts.atol + opts.rtol * np.linalg.norm(x):
            return x, _control(sys, K, t, x)
    raise NewtonFailure(f"Newton did not converge in {opts.max_iter} iterations at t={t:.6g}")


def ft_step(sys: ClosedLoopSystem, gains, x_prev, t_prev: float, tau: float,
            newton_opts: NewtonOptions = None, coupling: str = "implicit", u_prev=None,
            scheme: ThetaScheme = None):
    """Fractional-step-theta step: three chained theta sub-steps."""
    scheme = scheme or SCHEMES["FT"]
    x, t, u = np.asarray(x_prev, dtype=float), t_prev, u_prev
    for th, frac in zip(scheme.thetas, scheme.fractions):
        h = frac * tau
        x, u = theta_step(sys, gains, x, t, h, th, newton_opts, coupling, u)
        t = t + h
    return x, u


def scheme_step(sys, gains, scheme: ThetaScheme, x, t, tau, newton_opts, coupling, u_prev):
    if len(scheme.thetas) == 1:
        return theta_step(sys, gains, x, t, tau, scheme.thetas[0], newton_opts, coupling, u_prev)
    return ft_step(sys, gains, x, t, tau, newton_opts, coupling, u_prev, scheme)


@dataclass
class SimulationResult:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    taus: np.ndarray
    indicators: np.ndarray
    retries: np.ndarray
    forced: np.ndarray
    proposed: np.ndarray
    outcome: str
    scheme: str
    work: float = 0.0
    runtime: float = 0.0
    message: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def state_norms(self):
        return np.linalg.norm(self.states, axis=1)

    @property
    def control_norms(self):
        return np.linalg.norm(self.controls, axis=1)

    @property
    def n_steps(self):
        return len(self.times) - 1

    def to_csv(self, path):
        """Columns ``t, tau, x_norm, u_norm, u_0.., indicator, retried, forced``."""
        m = self.controls.shape[1]
        cols = ["t", "tau", "x_norm", "u_norm"]
        ucols = [f"u_{i}" for i in range(m)] if m <= 8 else []
        cols += ucols + ["indicator", "retried", "forced", "tau_proposed"]
        data = [self.times, self.taus, self.state_norms, self.control_norms]
        if ucols:
            data += [self.controls[:, i] for i in range(m)]
        data += [self.indicators, self.retries, self.forced.astype(float), self.proposed]
        arr = np.column_stack(data)
        np.savetxt(path, arr, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")

    def summary(self):
        return {
            "outcome": self.outcome, "scheme": self.scheme, "n_steps": int(self.n_steps),
            "retries": int(np.sum(self.retries)), "forced": int(np.sum(self.forced)),
            "work": float(self.work), "runtime": float(self.runtime), "message": self.message,
            "t_final": float(self.times[-1]),
            "max_state_norm": float(np.max(self.state_norms)),
            **{k: v for k, v in self.metadata.items() if isinstance(v, (int, float, str, bool))},
        }

    def save_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=1, sort_keys=True)


def simulate(sys: ClosedLoopSystem, gains, scheme="FT", grid_ref=None,
             adaptivity: AdaptiveConfig = None, coupling: str = "implicit",
             newton_opts: NewtonOptions = None, blowup_threshold: float = None,
             tau_init: float = None) -> SimulationResult:
    """Simulate the closed loop on ``grid_ref`` (fixed) or adaptively (FT only).

    Blow-up (state norm above ``blowup_threshold``, default
    ``1e6 (1 + ||x0||)``) and solver breakdown are reported through
    ``outcome`` instead of being raised.
    """
    scheme = get_scheme(scheme)
    if grid_ref is None:
        grid_ref = np.asarray(gains.grid)
    grid_ref = np.asarray(grid_ref, dtype=float)
    if grid_ref.ndim != 1 or len(grid_ref) < 2 or np.any(np.diff(grid_ref) <= 0):
        raise ValueError("grid_ref must be strictly increasing with at least two points")
    if adaptivity is not None and scheme.name != "FT":
        raise ValueError("adaptive step sizes are only available for the FT scheme")
    if coupling not in ("implicit", "lagged"):
        raise ValueError("coupling must be implicit or lagged")
    opts = newton_opts or NewtonOptions()
    gk = _gain_fn(gains)
    x = sys.x0.copy()
    thr = blowup_threshold if blowup_threshold is not None else 1e6 * (1 + np.linalg.norm(x))
    t = grid_ref[0]
    u = _control(sys, gk(t), t, x)
    rec = {"t": [t], "x": [x], "u": [u], "tau": [0.0], "I": [0.0], "retry": [0],
           "forced": [False], "prop": [0.0]}
    outcome, message, work = "completed", "", 0.0
    started = time.perf_counter()

    def push(t, x, u, tau, I, retries, forced, prop):
        rec["t"].append(t)
        rec["x"].append(x)
        rec["u"].append(u)
        rec["tau"].append(tau)
        rec["I"].append(I)
        rec["retry"].append(retries)
        rec["forced"].append(forced)
        rec["prop"].append(prop)

    if adaptivity is None:
        for k in range(1, len(grid_ref)):
            tau = grid_ref[k] - grid_ref[k - 1]
            try:
                x_new, u_new = scheme_step(sys, gk, scheme, x, t, tau, opts, coupling, u)
            except NewtonFailure as exc:
                outcome, message = "blow-up", f"solver breakdown at t={t:.6g}: {exc}"
                break
            work += 1
            t = grid_ref[k]
            x, u = x_new, u_new
            push(t, x, u, tau, 0.0, 0, False, tau)
            nx = np.linalg.norm(x)
            if not np.isfinite(nx) or nx > thr:
                outcome, message = "blow-up", f"state norm {nx:.3e} exceeded {thr:.3e} at t={t:.6g}"
                break
    else:
        cfg = adaptivity
        tau = min(tau_init or cfg.tau_max, cfg.tau_max)
        j = 1
        t_end = grid_ref[-1]
        while t < t_end and outcome == "completed":
            while j < len(grid_ref) and grid_ref[j] <= t + 1e-14 * max(1.0, abs(t)):
                j += 1
            t_ref = grid_ref[j]
            tau = min(tau, t_ref - t)
            retries, forced = 0, False
            while True:
                try:
                    if cfg.indicator == "error":
                        xc, _ = ft_step(sys, gk, x, t, tau, opts, coupling, u)
                        xf, uf, tf = x, u, t
                        for _ in range(3):
                            xf, uf = ft_step(sys, gk, xf, tf, tau / 3.0, opts, coupling, uf)
                            tf += tau / 3.0
                        x_new, u_new = xf, uf
                        I = indicator_error(xc, xf, cfg.chi)
                        work += 4
                    else:
                        x_new, u_new = ft_step(sys, gk, x, t, tau, opts, coupling, u)
                        work += 1
                        if cfg.indicator == "control_abs":
                            I = indicator_control_abs(u_new, u)
                        else:
                            I = indicator_control_scaled(u_new, u, tau)
                    failed = False
                except NewtonFailure as exc:
                    I, failed, fail_msg = np.inf, True, str(exc)
                    work += 1
                st = adapt_decision(I, tau, t, t_ref, cfg)
                if st.retry and tau > cfg.tau_min * (1 + 1e-12) and retries < cfg.max_retries:
                    retries += 1
                    tau = st.tau
                    continue
                forced = bool(st.retry)
                break
            if failed:
                outcome, message = "blow-up", f"solver breakdown at t={t:.6g}: {fail_msg}"
                break
            t_new = t_ref if abs(t + tau - t_ref) <= 1e-12 * max(1.0, abs(t_ref)) else t + tau
            x, u = x_new, u_new
            # proposal for the next step, relative to the new time
            jn = j if t_new < t_ref else j + 1
            if jn < len(grid_ref):
                nxt = adapt_decision(I, tau, t_new, grid_ref[jn], cfg)
                prop, tau_next = nxt.proposed, nxt.tau
            else:
                prop, tau_next = st.proposed, tau
            push(t_new, x, u, tau, I, retries, forced, prop)
            t = t_new
            tau = max(tau_next, 1e-300)
            nx = np.linalg.norm(x)
            if not np.isfinite(nx) or nx > thr:
                outcome, message = "blow-up", f"state norm {nx:.3e} exceeded {thr:.3e} at t={t:.6g}"
    runtime = time.perf_counter() - started
    meta = {"coupling": coupling, "adaptive": adaptivity is not None}
    if adaptivity is not None:
        meta["indicator"] = adaptivity.indicator
        meta["TOL"] = adaptivity.TOL
    if isinstance(gk, GainInterpolator):
        meta["gain_calls"] = gk.calls
        meta["gain_out_of_range"] = gk.out_of_range
    return SimulationResult(
        times=np.array(rec["t"]), states=np.array(rec["x"]), controls=np.array(rec["u"]),
        taus=np.array(rec["tau"]), indicators=np.array(rec["I"], dtype=float),
        retries=np.array(rec["retry"]), forced=np.array(rec["forced"]),
        proposed=np.array(rec["prop"]), outcome=outcome, scheme=scheme.name, work=work,
        runtime=runtime, message=message, metadata=meta)


def performance_index(result: SimulationResult, sys: ClosedLoopSystem) -> float:
    """Trapezoidal ``int ||C x||^2 + lam ||u||^2 dt + x(T)^T S x(T)``."""
    if result.outcome != "completed":
        raise UndefinedIndexError(f"performance index undefined for outcome {result.outcome!r}")
    C = np.zeros((0, sys.dim)) if sys.C is None else np.atleast_2d(sys.C)
    y = result.states @ C.T
    integrand = np.sum(y ** 2, axis=1) + sys.lam * np.sum(result.controls ** 2, axis=1)
    J = float(np.trapezoid(integrand, result.times)) if hasattr(np, "trapezoid") else \
        float(np.trapz(integrand, result.times))
    if sys.S is not None:
        xT = result.states[-1]
        J += float(xT @ np.asarray(sys.S) @ xT)
    return J


def control_energy(result: SimulationResult) -> float:
    u2 = np.sum(result.controls ** 2, axis=1)
    return float(np.trapezoid(u2, result.times))
