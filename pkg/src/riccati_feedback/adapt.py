"""Step-size control for closed-loop simulations.

The controller proposes ``tau_next = delta * tau`` with
``delta = (gamma * TOL / I_k) ** r`` for an indicator value ``I_k``. Steps are
retried when ``delta < delta_lo`` and kept unchanged inside the band
``[delta_lo, delta_hi]``. Proposals are clamped to ``[tau_min, tau_max]`` and
then shortened so that no reference time point is skipped.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

INDICATORS = ("error", "control_abs", "control_scaled")
EPS_FLOOR = 1e-300


@dataclass
class AdaptiveConfig:
    """Parameters of the step-size controller.

    ``r`` defaults to ``1`` for the control indicators and ``1/3`` for the
    error indicator. ``chi`` optionally selects state entries for the error
    indicator.
    """

    indicator: str = "control_scaled"
    TOL: float = 1e-2
    gamma: float = 0.9
    r: Optional[float] = None
    delta_lo: float = 0.8
    delta_hi: float = 1.2
    tau_min: float = 1e-4
    tau_max: float = 2.5e-3
    chi: Optional[Sequence[int]] = None
    max_retries: int = 25

    def __post_init__(self):
        if self.indicator not in INDICATORS:
            raise ValueError(f"unknown indicator {self.indicator!r}; expected one of {INDICATORS}")
        if self.r is None:
            self.r = 1.0 / 3.0 if self.indicator == "error" else 1.0
        if not self.TOL > 0:
            raise ValueError("TOL must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not self.r > 0:
            raise ValueError("r must be positive")
        if not self.delta_lo <= 1 <= self.delta_hi:
            raise ValueError("need delta_lo <= 1 <= delta_hi")
        if not 0 < self.tau_min <= self.tau_max:
            raise ValueError("need 0 < tau_min <= tau_max")


@dataclass
class AdaptiveState:
    """Controller state after one decision."""

    tau: float
    indicator: float
    delta: float
    retry: bool
    proposed: float
    forced: bool = False


def indicator_error(x_coarse, x_fine, chi=None) -> float:
    """``||chi(x_coarse) - chi(x_fine)||_2``; ``chi`` selects entries."""
    d = np.asarray(x_coarse, dtype=float) - np.asarray(x_fine, dtype=float)
    if chi is not None:
        d = d[np.asarray(chi)]
    return float(np.linalg.norm(d))


def indicator_control_abs(u_k, u_prev) -> float:
    return float(np.linalg.norm(np.asarray(u_k, dtype=float) - np.asarray(u_prev, dtype=float)))


def indicator_control_scaled(u_k, u_prev, tau) -> float:
    """Norm of the difference quotient ``(u_k - u_prev) / tau``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return indicator_control_abs(u_k, u_prev) / tau


def controller_delta(I_k: float, cfg: AdaptiveConfig) -> float:
    return (cfg.gamma * cfg.TOL / max(I_k, EPS_FLOOR)) ** cfg.r


def adapt_decision(I_k: float, tau_k: float, t_k: float, t_next_ref: float,
                   cfg: AdaptiveConfig) -> AdaptiveState:
    """Full controller decision including the pre-snap proposal."""
    if not tau_k > 0:
        raise ValueError("tau_k must be positive")
    if not t_k < t_next_ref:
        raise ValueError("t_k must lie before the next reference point")
    if np.isnan(I_k):
        I_k = np.inf
    delta = controller_delta(I_k, cfg)
    retry = delta < cfg.delta_lo
    if cfg.delta_lo <= delta <= cfg.delta_hi:
        tau = tau_k
    else:
        tau = delta * tau_k
    tau = min(max(tau, cfg.tau_min), cfg.tau_max)
    proposed = tau
    if t_k + tau > t_next_ref:
        tau = t_next_ref - t_k
    return AdaptiveState(tau=tau, indicator=float(I_k), delta=float(delta), retry=bool(retry),
                         proposed=proposed)


def adapt_step(I_k: float, tau_k: float, t_k: float, t_next_ref: float,
               cfg: AdaptiveConfig):
    """Return ``(tau_next, retry)``.

    ``delta = (gamma TOL / max(I_k, 1e-300))^r``; a retry is requested when
    ``delta < delta_lo``. Inside ``[delta_lo, delta_hi]`` (boundaries
    included) the step size is kept, otherwise it is scaled by ``delta``. The
    result is clamped to ``[tau_min, tau_max]`` and finally cut so that
    ``t_k + tau_next`` does not pass ``t_next_ref``; that cut may fall below
    ``tau_min``.
    """
    st = adapt_decision(I_k, tau_k, t_k, t_next_ref, cfg)
    return st.tau, st.retry
