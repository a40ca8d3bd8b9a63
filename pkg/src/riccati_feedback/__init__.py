"""Feedback control of non-autonomous systems via differential Riccati equations.

Low-rank BDF and splitting solvers for the generalized DRE, a dense reference
integrator, and closed-loop simulation with theta schemes and adaptive
fractional-step-theta time stepping.
"""
__version__ = "0.1.0"

from .adapt import AdaptiveConfig, adapt_step
from .bench import (BenchmarkSpec, build_conduction_tv, build_small_laplacian,
                    build_surrogate_nl, eoc)
from .closedloop import (ClosedLoopSystem, SimulationResult, ft_step, interp_gain,
                         performance_index, simulate, theta_step)
from .dre_bdf import GainTrajectory, solve_dre_bdf, startup_grid
from .dre_ref import e_dre, e_gain, solve_reference
from .dre_split import solve_dre_splitting
from .estimators import ClosedLoopSimulator, RiccatiFeedback
from .lowrank import LowRankFactor, compress
from .sysmodel import TimeVaryingSystem

__all__ = [
    "AdaptiveConfig", "adapt_step", "BenchmarkSpec", "build_conduction_tv",
    "build_small_laplacian", "build_surrogate_nl", "eoc", "ClosedLoopSystem",
    "SimulationResult", "ft_step", "interp_gain", "performance_index", "simulate",
    "theta_step", "GainTrajectory", "solve_dre_bdf", "startup_grid", "e_dre", "e_gain",
    "solve_reference", "solve_dre_splitting", "ClosedLoopSimulator", "RiccatiFeedback",
    "LowRankFactor", "compress", "TimeVaryingSystem",
]
