"""Benchmark problems and convergence metrics.

Three generators are provided:

* ``small_laplacian``: a 5-point Laplacian with scalar time factors on
  ``A``, ``M``, ``B`` and ``C`` (non-autonomous, commuting).
* ``conduction_tv``: a heat conduction analogue with a time-varying
  conductivity and Robin-type boundary cooling (non-autonomous, not
  commuting because of the boundary term).
* ``surrogate_nl``: a semilinear heat equation with a cubic reaction term
  and a boundary perturbation pulse, used for closed-loop simulations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps

from .sysmodel import TimeVaryingSystem

BENCHMARKS = ("small_laplacian", "conduction_tv", "surrogate_nl")


def laplacian_2d(n_side: int, bc: str = "dirichlet") -> sps.csr_matrix:
    """Standard 5-point Laplacian on the interior nodes of ``[0,1]^2``.

    ``bc="dirichlet"`` uses spacing ``h = 1/(n_side+1)``; ``bc="neumann"``
    uses the nodes of a closed grid with spacing ``h = 1/(n_side-1)`` and
    mirrored ghost nodes. The result is scaled by ``h^-2``.
    """
    if bc == "dirichlet":
        h = 1.0 / (n_side + 1)
        T = sps.diags([np.ones(n_side - 1), -2 * np.ones(n_side), np.ones(n_side - 1)],
                      [-1, 0, 1])
    elif bc == "neumann":
        h = 1.0 / (n_side - 1)
        off = np.ones(n_side - 1)
        T = sps.diags([off, -2 * np.ones(n_side), off], [-1, 0, 1]).tolil()
        T[0, 1] = 2.0
        T[-1, -2] = 2.0
        T = T.tocsr()
    else:
        raise ValueError(f"unknown boundary condition {bc!r}")
    eye = sps.identity(n_side)
    return (sps.kron(eye, T) + sps.kron(T, eye)).tocsr() / h ** 2


# -- small-scale academic example --------------------------------------------------

def small_laplacian_nodes(grid_side: int):
    """Indices of the three input nodes on the grid diagonal."""
    g = grid_side
    return [(i * g + i) for i in (g // 4, g // 2, (3 * g) // 4)]


def build_small_laplacian(grid_side: int = 5, lam: float = 1.0, t_end: float = 0.1):
    """Small non-autonomous test problem on the unit square.

    ``A(t) = (1 + sin(2 pi t)/2) A_hat``, ``M(t) = (2 + sin(2 pi t)/2) I``,
    ``B_hat(t) = (3 + cos t) B_bar``, ``C(t) = (1 - min(t, 1)) C_bar`` with the
    Dirichlet Laplacian ``A_hat``, three node-indicator input columns and a
    uniform averaging output row. The horizon is ``[0, 0.1]`` and ``S = 0``.
    """
    if grid_side < 2:
        raise ValueError("grid_side must be at least 2")
    n = grid_side ** 2
    A_hat = laplacian_2d(grid_side).toarray()
    B_bar = np.zeros((n, 3))
    for j, node in enumerate(small_laplacian_nodes(grid_side)):
        B_bar[node, j] = 1.0
    C_bar = np.full((1, n), 1.0 / n)
    two_pi = 2 * math.pi

    sys = TimeVaryingSystem.from_scalar_scaled(
        alpha=lambda t: 1.0 + 0.5 * math.sin(two_pi * t), A_bar=A_hat,
        mu=lambda t: 2.0 + 0.5 * math.sin(two_pi * t),
        dmu=lambda t: math.pi * math.cos(two_pi * t), M_bar=np.eye(n),
        beta=lambda t: 3.0 + math.cos(t), B_bar=B_bar,
        gamma=lambda t: 1.0 - min(t, 1.0), C_bar=C_bar,
        lam=lam, S=np.zeros((n, n)), t0=0.0, t_end=t_end, name="small_laplacian")
    return sys


# -- conduction analogue -----------------------------------------------------------

HEAT_CAPACITY = 7620.0
DENSITY = 654.0
GAMMA_BOUNDARY = 7.0164
KAPPA0 = 26.4


def conductivity(t: float, t_end: float = 4500.0) -> float:
    return KAPPA0 + 0.1 * (2.0 + math.cos(2 * math.pi * t / t_end))


def _boundary_segments(n_side: int, count: int):
    """Split the boundary ring of an ``n_side`` grid into ``count`` node sets."""
    ring = []
    g = n_side
    ring += [(0, j) for j in range(g - 1)]
    ring += [(i, g - 1) for i in range(g - 1)]
    ring += [(g - 1, j) for j in range(g - 1, 0, -1)]
    ring += [(i, 0) for i in range(g - 1, 0, -1)]
    ids = [i * g + j for i, j in ring]
    if count > len(ids):
        raise ValueError(f"{count} segments requested but the boundary has {len(ids)} nodes")
    bounds = np.linspace(0, len(ids), count + 1).round().astype(int)
    return [ids[bounds[k]:bounds[k + 1]] for k in range(count)]


def _probe_regions(n_side: int, count: int):
    """``count`` interior 2x2 blocks spread along a horizontal and a vertical line."""
    g = n_side
    cells = []
    centers = np.linspace(1, g - 3, count).round().astype(int)
    for k, c in enumerate(centers):
        row = g // 3 if k % 2 == 0 else (2 * g) // 3 - 1
        row = min(max(row, 1), g - 3)
        cells.append([(row + a) * g + (c + b) for a in (0, 1) for b in (0, 1)])
    return cells


def build_conduction_tv(n_side: int = 10, m: int = 7, p: int = 6, lam: float = 1.0,
                        t_end: float = 4500.0, kappa_const: bool = False):
    """Heat conduction analogue with time-varying conductivity.

    ``M x' = (kappa(t)/(c rho) S + gamma/(c rho) M_gamma) x + gamma/(c rho) B u``
    on an ``n_side x n_side`` node grid of the unit square with Neumann
    Laplacian ``S``. ``M_gamma`` is a negative boundary mass on the ``m``
    input segments (cooling), ``B`` has one scaled indicator column per
    segment and ``C`` averages ``p`` interior 2x2 probe blocks.
    """
    if n_side < 4:
        raise ValueError("n_side must be at least 4")
    n = n_side ** 2
    h = 1.0 / (n_side - 1)
    segs = _boundary_segments(n_side, m)
    probes = _probe_regions(n_side, p)
    if p > n_side - 2:
        raise ValueError(f"at most {n_side - 2} probe regions fit on the grid")
    S_bar = laplacian_2d(n_side, bc="neumann")
    boundary = np.zeros(n)
    B_bar = np.zeros((n, m))
    for k, seg in enumerate(segs):
        boundary[seg] = 1.0 / h
        B_bar[seg, k] = 1.0 / h
    M_gamma = -sps.diags(boundary)
    C = np.zeros((p, n))
    for k, cells in enumerate(probes):
        C[k, cells] = 1.0 / len(cells)
    cr = HEAT_CAPACITY * DENSITY
    kappa = (lambda t: conductivity(0.0, t_end)) if kappa_const else \
        (lambda t: conductivity(t, t_end))
    S_sc = (S_bar / cr).tocsr()
    G_sc = (GAMMA_BOUNDARY / cr * M_gamma).tocsr()
    B_hat = GAMMA_BOUNDARY / cr * B_bar
    M = sps.identity(n, format="csr")
    zero = sps.csr_matrix((n, n))
    sys = TimeVaryingSystem(
        dim=n, n_inputs=m, n_outputs=p,
        A=lambda t: (kappa(t) * S_sc + G_sc).tocsr(), M=lambda t: M, Mdot=lambda t: zero,
        B_hat=lambda t: B_hat, C=lambda t: C, lam=lam, S=np.zeros((n, n)),
        t0=0.0, t_end=t_end, name="conduction_tv",
        metadata={"kappa_const": kappa_const})
    return sys


# -- metrics -------------------------------------------------------------------------

def eoc(errors, steps=None):
    """Observed orders ``log(e_i/e_{i+1}) / log(h_i/h_{i+1})``.

    ``errors`` is either a list of errors for successive step halvings or a
    list of ``(step, error)`` pairs.
    """
    errors = list(errors)
    if len(errors) < 2:
        raise ValueError("need at least two errors")
    if steps is None and np.ndim(errors[0]) == 1:
        steps = [e[0] for e in errors]
        errors = [e[1] for e in errors]
    e = np.asarray(errors, dtype=float)
    if np.any(e <= 0):
        raise ValueError("errors must be positive")
    if steps is None:
        return list(np.log2(e[:-1] / e[1:]))
    h = np.asarray(steps, dtype=float)
    return list(np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:]))


# -- nonlinear surrogate -------------------------------------------------------------

@dataclass(frozen=True)
class SurrogateParams:
    """Frozen parameters of the nonlinear surrogate.

    The values of ``eta``, ``phi0`` and ``input_gain`` come out of a bring-up
    calibration: with lagged feedback, implicit Euler and the trapezoidal rule
    at ``tau = 2.5e-3`` diverge for ``lam = 1e-7`` while the FT sub-steps stay
    stable, and every scheme is stable for ``lam = 1e-4``.
    """

    diffusivity: float = 1.0
    reaction: float = 0.0
    eta: float = 2.0
    phi0: float = 1.0
    t_c: float = 0.2
    width: float = 0.03
    input_gain: float = 1.0
    t_end: float = 1.0


SURROGATE_DEFAULTS = SurrogateParams()


def _pulse(p: SurrogateParams):
    return lambda t: p.phi0 * math.exp(-((t - p.t_c) / p.width) ** 2)


def build_surrogate_nl(n_side: int = 15, lam: float = 1e-4,
                       params: SurrogateParams = SURROGATE_DEFAULTS):
    """Semilinear heat equation with a cubic reaction term.

    ``x' = d L x + a x + eta x^3 + b_top u + b_bottom phi(t)`` on the interior
    nodes of the unit square with homogeneous Dirichlet data except for the
    bottom edge, whose boundary value is the pulse
    ``phi(t) = phi0 exp(-((t - t_c)/w)^2)``. The control acts as the
    boundary value on the top edge (one input) and two outputs average
    probe columns next to the left and right edges.

    Returns
    -------
    (ClosedLoopSystem, TimeVaryingSystem)
        The nonlinear closed-loop problem in deviation form around the zero
        reference, and its (autonomous) linearization for the gain DRE.
    """
    from .closedloop import ClosedLoopSystem

    if n_side < 5:
        raise ValueError("n_side must be at least 5")
    g = n_side
    n = g * g
    h = 1.0 / (g + 1)
    p = params
    L = laplacian_2d(g)
    A = (p.diffusivity * L + p.reaction * sps.identity(n)).tocsr()
    # row index i runs bottom (0) to top (g-1); node id = i*g + j
    b_top = np.zeros(n)
    b_top[(g - 1) * g:] = p.diffusivity / h ** 2
    b_bot = np.zeros(n)
    b_bot[:g] = p.diffusivity / h ** 2
    B = (p.input_gain * b_top).reshape(n, 1)
    C = np.zeros((2, n))
    rows = np.arange(g // 4, g - g // 4)
    C[0, rows * g + 1] = 1.0 / len(rows)
    C[1, rows * g + g - 2] = 1.0 / len(rows)
    phi = _pulse(p)
    eta = p.eta

    def rhs(t, x, u):
        return A @ x + eta * x ** 3 + B @ np.atleast_1d(u) + phi(t) * b_bot

    def jac(t, x, u):
        return (A + sps.diags(3.0 * eta * x ** 2)).tocsr()

    cls = ClosedLoopSystem(dim=n, n_inputs=1, rhs=rhs, input_map=lambda t: B,
                           rhs_jacobian=jac, x0=np.zeros(n), t0=0.0, t_end=p.t_end,
                           C=C, lam=lam, S=np.zeros((n, n)), perturbation=phi,
                           name="surrogate_nl")
    lin = TimeVaryingSystem.from_constant(A, sps.identity(n, format="csr"), B, C, lam=lam,
                                          S=np.zeros((n, n)), t0=0.0, t_end=p.t_end,
                                          name="surrogate_nl")
    return cls, lin


# -- benchmark registry --------------------------------------------------------------

BENCHMARK_DEFAULTS = {
    "small_laplacian": {"grid_side": 5, "lam": 1.0, "t_end": 0.1, "n_t": 128},
    "conduction_tv": {"n_side": 10, "m": 7, "p": 6, "lam": 1.0, "t_end": 4500.0,
                      "kappa_const": False, "n_t": 128},
    "surrogate_nl": {"n_side": 15, "lam": 1e-4, "n_t": 400, "coupling": "lagged",
                     **{k: getattr(SURROGATE_DEFAULTS, k)
                        for k in SurrogateParams.__dataclass_fields__}},
}

_RUN_KEYS = ("n_t", "coupling")


@dataclass
class BenchmarkSpec:
    """Benchmark id plus parameter overrides on top of :data:`BENCHMARK_DEFAULTS`.

    ``n_t`` counts time steps (the surrogate default of 400 steps gives 401
    grid points and ``tau = 2.5e-3``). ``coupling`` is the default feedback
    coupling for closed-loop runs.
    """

    id: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.id not in BENCHMARKS:
            raise ValueError(f"unknown benchmark {self.id!r}; expected one of {BENCHMARKS}")
        unknown = set(self.params) - set(BENCHMARK_DEFAULTS[self.id])
        if unknown:
            raise ValueError(f"unknown parameters for {self.id}: {sorted(unknown)}")

    @property
    def resolved(self) -> dict:
        return {**BENCHMARK_DEFAULTS[self.id], **self.params}

    def build(self):
        """Return the :class:`TimeVaryingSystem` (and, for the surrogate, the
        closed-loop system as a second value)."""
        kw = {k: v for k, v in self.resolved.items() if k not in _RUN_KEYS}
        if self.id == "small_laplacian":
            return build_small_laplacian(**kw)
        if self.id == "conduction_tv":
            return build_conduction_tv(**kw)
        n_side, lam = kw.pop("n_side"), kw.pop("lam")
        cls, lin = build_surrogate_nl(n_side, lam, SurrogateParams(**kw))
        return lin, cls
