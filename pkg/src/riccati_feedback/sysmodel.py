"""Time-varying coefficient data of a semi-discretized control system.

A :class:`TimeVaryingSystem` bundles the matrix functions ``A(t)``, ``M(t)``,
``Mdot(t)``, ``B_hat(t)`` and ``C(t)`` together with the control weight
``lam`` and the terminal weight ``S``. The generalized Riccati equation

    -M^T X' M = C^T C + (Mdot + A)^T X M + M^T X (Mdot + A) - M^T X B B^T X M

with ``B = B_hat / sqrt(lam)`` is posed on the horizon ``[t0, t_end]`` and
solved backwards from ``M^T X M = S`` at ``t_end``.

Solvers integrate forward in a reversed time variable (see
:func:`time_reverse`). A reversed system keeps track of its orientation so
that :func:`effective_drift` always returns the drift of the original
equation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.io
import scipy.linalg as spla
import scipy.sparse as sps

MatrixFunction = Callable[[float], np.ndarray]
ScalarFunction = Callable[[float], float]


class HorizonError(ValueError):
    """Raised when a matrix function is evaluated outside the horizon."""


class EvaluationError(RuntimeError):
    """Raised when coefficient evaluation fails (non-finite or singular data)."""


def _as_matrix(a):
    if sps.issparse(a):
        return a.tocsr()
    return np.atleast_2d(np.asarray(a, dtype=float))


def to_dense(a) -> np.ndarray:
    if sps.issparse(a):
        return a.toarray()
    return np.asarray(a, dtype=float)


@dataclass(frozen=True)
class ScalarScaled:
    """Structure ``A(t) = alpha(t) A_bar``, ``M(t) = mu(t) M_bar``.

    Only ``A`` and ``M`` are constrained; this is exactly the structure under
    which the closed-form affine splitting flow applies.
    """

    alpha: ScalarFunction
    A_bar: object
    mu: ScalarFunction
    dmu: ScalarFunction
    M_bar: object


@dataclass(frozen=True)
class CoefficientSnapshot:
    t: float
    A: object
    M: object
    Mdot: object
    B: np.ndarray
    C: np.ndarray
    orientation: int = 1


@dataclass(frozen=True)
class TimeVaryingSystem:
    """Coefficient functions of the generalized non-autonomous DRE.

    Parameters
    ----------
    A, M, Mdot, B_hat, C
        Callables ``t -> matrix``. ``Mdot`` may be ``None``, in which case a
        central finite difference of ``M`` is used and ``mdot_fd`` is set.
    lam
        Control weight (``lambda > 0``).
    S
        Terminal weight, ``n x n`` symmetric positive semidefinite.
    t0, t_end
        Horizon.
    """

    dim: int
    n_inputs: int
    n_outputs: int
    A: MatrixFunction
    M: MatrixFunction
    Mdot: Optional[MatrixFunction]
    B_hat: MatrixFunction
    C: MatrixFunction
    lam: float = 1.0
    S: Optional[np.ndarray] = None
    t0: float = 0.0
    t_end: float = 1.0
    scalar_scaled: Optional[ScalarScaled] = None
    orientation: int = 1
    name: str = "system"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.t0 < self.t_end):
            raise ValueError(f"empty horizon [{self.t0}, {self.t_end}]")
        if not self.lam > 0:
            raise ValueError("control weight lam must be positive")
        if self.S is None:
            object.__setattr__(self, "S", np.zeros((self.dim, self.dim)))
        if self.Mdot is None:
            object.__setattr__(self, "Mdot", _central_difference(self.M))
            self.metadata["mdot_fd"] = True

    # -- constructors -----------------------------------------------------
    @classmethod
    def from_constant(cls, A, M, B_hat, C, *, lam=1.0, S=None, t0=0.0, t_end=1.0,
                      name="constant"):
        A, M = _as_matrix(A), _as_matrix(M)
        B_hat, C = to_dense(B_hat), to_dense(C)
        n = A.shape[0]
        zero = sps.csr_matrix((n, n)) if sps.issparse(M) else np.zeros((n, n))
        return cls(dim=n, n_inputs=B_hat.shape[1], n_outputs=C.shape[0],
                   A=lambda t: A, M=lambda t: M, Mdot=lambda t: zero,
                   B_hat=lambda t: B_hat, C=lambda t: C, lam=lam, S=S,
                   t0=t0, t_end=t_end,
                   scalar_scaled=ScalarScaled(_one, A, _one, _zero, M), name=name)

    @classmethod
    def from_scalar_scaled(cls, alpha, A_bar, mu, dmu, M_bar, beta, B_bar, gamma, C_bar,
                           *, lam=1.0, S=None, t0=0.0, t_end=1.0, name="scalar_scaled"):
        """Build ``A = alpha A_bar``, ``M = mu M_bar``, ``B_hat = beta B_bar``,
        ``C = gamma C_bar`` from scalar functions and constant matrices."""
        A_bar, M_bar = _as_matrix(A_bar), _as_matrix(M_bar)
        B_bar, C_bar = to_dense(B_bar), to_dense(C_bar)
        n = A_bar.shape[0]
        return cls(dim=n, n_inputs=B_bar.shape[1], n_outputs=C_bar.shape[0],
                   A=lambda t: alpha(t) * A_bar, M=lambda t: mu(t) * M_bar,
                   Mdot=lambda t: dmu(t) * M_bar,
                   B_hat=lambda t: beta(t) * B_bar, C=lambda t: gamma(t) * C_bar,
                   lam=lam, S=S, t0=t0, t_end=t_end,
                   scalar_scaled=ScalarScaled(alpha, A_bar, mu, dmu, M_bar), name=name)

    @property
    def horizon(self):
        return (self.t0, self.t_end)

    def with_lambda(self, lam):
        return replace(self, lam=lam)

    def validate(self, samples: Sequence[float] = None, *, check_mdot=True, cond_max=1e14):
        """Run the consistency checks that are skipped during evaluation.

        Checks invertibility of ``M``, agreement of ``Mdot`` with a central
        difference of ``M`` and symmetry/semi-definiteness of ``S``.
        Raises :class:`EvaluationError` on the first violation.
        """
        if samples is None:
            samples = np.linspace(self.t0, self.t_end, 5)
        S = to_dense(self.S)
        nS = np.linalg.norm(S, 2) if S.size else 0.0
        if np.linalg.norm(S - S.T) > 1e-12 * (1 + nS):
            raise EvaluationError("terminal weight S is not symmetric")
        if S.size and np.linalg.eigvalsh(0.5 * (S + S.T)).min() < -1e-12 * nS:
            raise EvaluationError("terminal weight S is not positive semidefinite")
        fd = _central_difference(self.M, h_rel=1e-6)
        for t in samples:
            snap = evaluate(self, t)
            M = to_dense(snap.M)
            if not np.isfinite(np.linalg.cond(M)) or np.linalg.cond(M) > cond_max:
                raise EvaluationError(f"M({t}) is singular or ill-conditioned")
            if check_mdot and not self.metadata.get("mdot_fd"):
                Md = to_dense(snap.Mdot)
                # one-sided near the horizon ends is not needed: M is smooth past them
                err = np.linalg.norm(to_dense(fd(t)) - Md)
                if err > 1e-6 * (1 + np.linalg.norm(Md)):
                    raise EvaluationError(f"Mdot inconsistent with M at t={t} (err {err:.2e})")
        return True


def _one(t):
    return 1.0


def _zero(t):
    return 0.0


def _central_difference(M: MatrixFunction, h_rel=1e-6) -> MatrixFunction:
    def Mdot(t):
        h = h_rel * (1.0 + abs(t))
        return (M(t + h) - M(t - h)) / (2.0 * h)
    return Mdot


def evaluate(system: TimeVaryingSystem, t: float) -> CoefficientSnapshot:
    """Evaluate all coefficient functions at ``t``; ``B = B_hat(t)/sqrt(lam)``."""
    t0, t1 = system.t0, system.t_end
    slack = 1e-10 * (t1 - t0)
    if not (t0 - slack <= t <= t1 + slack):
        raise HorizonError(f"t={t} outside horizon [{t0}, {t1}]")
    t = min(max(t, t0), t1)
    try:
        A = _as_matrix(system.A(t))
        M = _as_matrix(system.M(t))
        Mdot = _as_matrix(system.Mdot(t))
        B_hat = np.atleast_2d(to_dense(system.B_hat(t)))
        C = np.atleast_2d(to_dense(system.C(t)))
    except (HorizonError, EvaluationError):
        raise
    except Exception as exc:  # noqa: BLE001 - user callbacks may raise anything
        raise EvaluationError(f"coefficient evaluation failed at t={t}: {exc}") from exc
    return CoefficientSnapshot(t=t, A=A, M=M, Mdot=Mdot, B=B_hat / math.sqrt(system.lam),
                               C=C, orientation=system.orientation)


def time_reverse(system: TimeVaryingSystem) -> TimeVaryingSystem:
    """Substitute ``t -> t_end + t0 - t`` in every coefficient function.

    ``Mdot`` is negated so that it stays the derivative of the reversed ``M``.
    The orientation flag flips, which keeps :func:`effective_drift` equal to
    the drift of the original equation.
    """
    t0, t1 = system.t0, system.t_end

    def rev(f):
        return lambda t: f(t1 + t0 - t)

    def rev_neg(f):
        return lambda t: -f(t1 + t0 - t)

    ss = system.scalar_scaled
    if ss is not None:
        ss = ScalarScaled(rev(ss.alpha), ss.A_bar, rev(ss.mu), rev_neg(ss.dmu), ss.M_bar)
    return replace(system, A=rev(system.A), M=rev(system.M), Mdot=rev_neg(system.Mdot),
                   B_hat=rev(system.B_hat), C=rev(system.C), scalar_scaled=ss,
                   orientation=-system.orientation, metadata=dict(system.metadata))


def effective_drift(snapshot: CoefficientSnapshot):
    """``Mdot + A`` in original time orientation.

    For a reversed snapshot the stored ``Mdot`` is the derivative with respect
    to the reversed time, so its sign is flipped back.
    """
    if snapshot.orientation >= 0:
        return snapshot.A + snapshot.Mdot
    return snapshot.A - snapshot.Mdot


def _solve_mt(M, rhs):
    """Return ``M^{-T} rhs``."""
    if sps.issparse(M):
        return sps.linalg.spsolve(M.T.tocsc(), rhs)
    return spla.solve(M.T, rhs)


def commutation_generator(system: TimeVaryingSystem, t: float) -> np.ndarray:
    """``Q(t) = ((A + Mdot) M^{-1})^T = M^{-T} (A + Mdot)^T`` as a dense matrix."""
    snap = evaluate(system, t)
    M = to_dense(snap.M)
    if not np.isfinite(np.linalg.cond(M)) or np.linalg.cond(M) > 1 / np.finfo(float).eps:
        raise EvaluationError(f"M({t}) is singular")
    return spla.solve(M.T, to_dense(effective_drift(snap)).T)


def check_commutation(system: TimeVaryingSystem, samples, tol: float = 1e-12):
    """Check ``Q(t) Q(s) = Q(s) Q(t)`` on sample pairs.

    Returns ``(ok, max_violation)`` where ``ok`` is true iff the largest
    commutator Frobenius norm is at most ``tol * max_t ||Q(t)||^2``.
    """
    pairs = [tuple(p) for p in samples]
    if not pairs:
        raise ValueError("empty sample set")
    cache = {}

    def Q(t):
        if t not in cache:
            cache[t] = commutation_generator(system, t)
        return cache[t]

    worst = 0.0
    for t, s in pairs:
        Qt, Qs = Q(t), Q(s)
        worst = max(worst, np.linalg.norm(Qt @ Qs - Qs @ Qt))
    scale = max(np.linalg.norm(q) ** 2 for q in cache.values())
    return bool(worst <= tol * scale), float(worst)


def default_commutation_samples(system: TimeVaryingSystem, k: int = 5):
    ts = np.linspace(system.t0, system.t_end, k)
    return [(a, b) for i, a in enumerate(ts) for b in ts[i + 1:]]


# -- scalar presets ------------------------------------------------------------

def scalar_preset(spec) -> tuple[ScalarFunction, ScalarFunction]:
    """Named scalar time functions with derivatives.

    ``spec`` is a dict with key ``kind`` and numeric parameters:

    * ``constant``: ``c``
    * ``affine``: ``a + b t``
    * ``sin-shift``: ``c + a sin(w t + phi)``
    * ``cos-shift``: ``c + a cos(w t + phi)``
    """
    if isinstance(spec, (int, float)):
        spec = {"kind": "constant", "c": float(spec)}
    kind = spec.get("kind")
    if kind == "constant":
        c = float(spec.get("c", 1.0))
        return (lambda t: c), (lambda t: 0.0)
    if kind == "affine":
        a, b = float(spec.get("a", 0.0)), float(spec.get("b", 0.0))
        return (lambda t: a + b * t), (lambda t: b)
    c, a = float(spec.get("c", 0.0)), float(spec.get("a", 1.0))
    w, phi = float(spec.get("w", 1.0)), float(spec.get("phi", 0.0))
    if kind == "sin-shift":
        return (lambda t: c + a * math.sin(w * t + phi)), (lambda t: a * w * math.cos(w * t + phi))
    if kind == "cos-shift":
        return (lambda t: c + a * math.cos(w * t + phi)), (lambda t: -a * w * math.sin(w * t + phi))
    raise ValueError(f"unknown scalar preset {kind!r}; expected constant, affine, sin-shift, cos-shift")


def load_matrix_market(path):
    """Read a Matrix Market file (coordinate -> CSR, array -> ndarray)."""
    a = scipy.io.mmread(str(path))
    if sps.issparse(a):
        return a.tocsr()
    return np.asarray(a, dtype=float)


def save_matrix_market(path, a, comment=""):
    scipy.io.mmwrite(str(path), a if sps.issparse(a) else np.asarray(a), comment=comment)
