import numpy as np
import pytest

from riccati_feedback.bench import build_small_laplacian
from riccati_feedback.sysmodel import TimeVaryingSystem


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_laplacian():
    return build_small_laplacian()


def scalar_system(a=-1.0, b=0.0, c=1.0, lam=1.0, t_end=1.0, s=0.0):
    """n=1 constant-coefficient system ``x' = a x + b u``, ``y = c x``."""
    return TimeVaryingSystem.from_constant(np.array([[a]]), np.eye(1), np.array([[b]]),
                                           np.array([[c]]), lam=lam, S=np.array([[s]]),
                                           t_end=t_end, name="scalar")


def random_system(rng, n=4, m=2, p=2, t_end=0.2, lam=1.0):
    """Small dense time-varying system with analytic ``Mdot``."""
    A0 = rng.standard_normal((n, n)) - 3 * np.eye(n)
    A1 = 0.5 * rng.standard_normal((n, n))
    M1 = 0.1 * rng.standard_normal((n, n))
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((p, n))
    return TimeVaryingSystem(
        dim=n, n_inputs=m, n_outputs=p,
        A=lambda t: A0 + np.sin(3 * t) * A1,
        M=lambda t: np.eye(n) + t * M1, Mdot=lambda t: M1,
        B_hat=lambda t: (1 + t) * B, C=lambda t: C, lam=lam, t0=0.0, t_end=t_end,
        name="random")


def bdf_step_instance(rng, n, order=2, tau=None):
    """Randomized ARE of the shape one BDF step produces.

    Sparse stable drift (scaled Laplacian plus a random perturbation), unit
    mass, two inputs, one output row and an indefinite history block.
    """
    import scipy.sparse as sps

    from riccati_feedback.are import AreProblem
    from riccati_feedback.bench import laplacian_2d
    from riccati_feedback.dre_bdf import bdf_coefficients

    g = int(round(np.sqrt(n)))
    if g * g != n:
        L = sps.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]) * n ** 2
    else:
        L = laplacian_2d(g)
    L = L / abs(L.diagonal()).max()
    A = (L + 0.05 * sps.random(n, n, density=2.0 / n, random_state=rng.integers(1 << 30))).tocsr()
    scheme = bdf_coefficients(order)
    tau = tau if tau is not None else 10.0 ** rng.uniform(-2, 0)
    tb = tau * scheme.beta
    A_k = (tb * A - 0.5 * sps.identity(n)).tocsr()
    B = np.sqrt(tb) * rng.standard_normal((n, 2))
    C = rng.standard_normal((1, n))
    blocks, cores = [C], [tb * np.eye(1)]
    for j in range(order):
        Q, _ = np.linalg.qr(rng.standard_normal((n, 3)))
        blocks.append(Q.T)
        cores.append(-scheme.alphas[j] * np.diag(rng.uniform(0.1, 1.0, 3)))
    import scipy.linalg as spla
    return AreProblem(A_k, sps.identity(n, format="csr"), B, np.vstack(blocks),
                      spla.block_diag(*cores))


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
