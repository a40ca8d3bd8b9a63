from fractions import Fraction

import numpy as np
import pytest

from riccati_feedback.dre_bdf import (GainTrajectory, StepFailure, assemble_step,
                                      bdf_coefficients, bdf_step, gain_from_factor,
                                      solve_dre_bdf, startup_grid, terminal_factor)
from riccati_feedback.dre_ref import e_dre, reference_gain, solve_reference
from riccati_feedback.lowrank import LowRankFactor, densify
from riccati_feedback.sysmodel import TimeVaryingSystem, evaluate, time_reverse

from conftest import random_system, scalar_system


def _derive_bdf(p):
    """BDF coefficients from the interpolation conditions in exact arithmetic."""
    # sum_{j=0..p} a_j (-j)^k = beta * k (-0)^{k-1} for k = 0..p with a_0 = 1
    n = p + 1
    rows = []
    for k in range(n):
        rows.append([Fraction((-j) ** k) for j in range(1, p + 1)] +
                    [Fraction(-k if k == 1 else 0)])
        rows[-1].append(Fraction(-(0 ** k)))
    # Gaussian elimination on rows (unknowns a_1..a_p, beta)
    m = [r[:] for r in rows]
    for c in range(n):
        piv = next(r for r in range(c, n) if m[r][c] != 0)
        m[c], m[piv] = m[piv], m[c]
        for r in range(n):
            if r != c and m[r][c] != 0:
                f = m[r][c] / m[c][c]
                m[r] = [a - f * b for a, b in zip(m[r], m[c])]
    sol = [m[r][n] / m[r][r] for r in range(n)]
    return sol[-1], sol[:-1]


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_coefficients_match_interpolation(p):
    beta, alphas = _derive_bdf(p)
    s = bdf_coefficients(p)
    np.testing.assert_allclose(s.beta, float(beta), rtol=1e-15)
    np.testing.assert_allclose(s.alphas, [float(a) for a in alphas], rtol=1e-15)
    np.testing.assert_allclose(1 + sum(s.alphas), 0.0, atol=1e-15)


def test_coefficient_table_values():
    assert bdf_coefficients(1).beta == 1.0 and bdf_coefficients(1).alphas == (-1.0,)
    np.testing.assert_allclose(bdf_coefficients(2).beta, 2 / 3)
    np.testing.assert_allclose(bdf_coefficients(4).alphas, (-48 / 25, 36 / 25, -16 / 25, 3 / 25))


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_exact_on_polynomials(p):
    s = bdf_coefficients(p)
    tau = 0.1
    for deg in range(p + 1):
        x = lambda t: t ** deg
        dx = lambda t: deg * t ** (deg - 1) if deg else 0.0
        lhs = x(1.0) + sum(a * x(1.0 - (j + 1) * tau) for j, a in enumerate(s.alphas))
        np.testing.assert_allclose(lhs, tau * s.beta * dx(1.0), atol=1e-14)


def test_scalar_bdf4_order():
    s = bdf_coefficients(4)
    errs = []
    for n in (40, 80, 160):
        tau = 1.0 / n
        xs = [np.exp(j * tau) for j in range(4)]
        for k in range(4, n + 1):
            rhs = -sum(a * xs[k - 1 - j] for j, a in enumerate(s.alphas))
            xs.append(rhs / (1 - tau * s.beta))
        errs.append(abs(xs[-1] - np.e))
    assert np.log2(errs[0] / errs[1]) >= 3.8 and np.log2(errs[1] / errs[2]) >= 3.8


def test_invalid_order_names_valid_set():
    with pytest.raises(ValueError, match="1, 2, 3, 4"):
        bdf_coefficients(5)


def test_startup_identity_for_low_orders():
    grid = np.linspace(0, 1, 9)
    aug, orders = startup_grid(grid, 1)
    np.testing.assert_array_equal(aug, grid)
    assert orders == [1] * 8
    aug, orders = startup_grid(grid, 2)
    np.testing.assert_array_equal(aug, grid)
    assert orders == [1] + [2] * 7


@pytest.mark.parametrize("n_t", [8, 64, 512])
def test_startup_extra_steps(n_t):
    grid = np.linspace(0, 0.1, n_t + 1)
    assert len(startup_grid(grid, 3, 10)[0]) - len(grid) == 10
    assert len(startup_grid(grid, 4, 10)[0]) - len(grid) == 20


def test_startup_schedule_reaches_full_order():
    grid = np.linspace(0, 1, 17)
    aug, orders = startup_grid(grid, 4, 3)
    assert np.all(np.diff(aug) > 0)
    assert set(grid) <= set(aug)
    assert orders[0] == 1 and max(orders) == 4
    # once on the original grid every step runs at full order
    first = int(np.searchsorted(aug, grid[4]))
    assert all(q == 4 for q in orders[first:])
    tt = (grid[1] - grid[0]) / 2 ** 3
    np.testing.assert_allclose(aug[1] - aug[0], tt)


def test_startup_underflow():
    with pytest.raises(ValueError):
        startup_grid(np.linspace(0, 1, 5), 3, 2000)


def test_zero_fixed_point_step():
    sys = TimeVaryingSystem.from_constant(-np.eye(3), np.eye(3), np.ones((3, 1)),
                                          np.zeros((1, 3)))
    X = bdf_step(sys, bdf_coefficients(1), 0.1, 0.1, [LowRankFactor.zeros(3)])
    assert X.s == 0 or np.abs(densify(X)).max() == 0.0


def test_scalar_bdf1_step():
    sys = scalar_system(a=-1.0, b=0.0, c=1.0)
    X = bdf_step(sys, bdf_coefficients(1), 0.1, 0.1, [LowRankFactor.zeros(1)])
    np.testing.assert_allclose(densify(X), [[0.1 / 1.2]], rtol=1e-13)


def test_step_matches_dense_implicit_euler(rng):
    sys = random_system(rng, n=4)
    rev = time_reverse(sys)
    tau, t1 = 0.01, 0.01
    G = rng.standard_normal((4, 2))
    X0 = G @ G.T
    X1 = densify(bdf_step(rev, bdf_coefficients(1), t1, tau,
                          [LowRankFactor(G, np.eye(2))], tol=1e-14))
    # dense oracle: residual of (X1 - X0)/tau = F(t1, X1) in the reversed-time form
    snap = evaluate(rev, t1)
    from riccati_feedback.sysmodel import effective_drift, to_dense
    M, F, B, C = to_dense(snap.M), to_dense(effective_drift(snap)), snap.B, snap.C
    R = (M.T @ (X1 - X0) @ M / tau - (C.T @ C + F.T @ X1 @ M + M.T @ X1 @ F
                                       - M.T @ X1 @ B @ B.T @ X1 @ M))
    assert np.linalg.norm(R) <= 1e-10 * np.linalg.norm(C.T @ C)


def test_assemble_step_shapes(rng):
    sys = random_system(rng)
    snap = evaluate(sys, 0.1)
    hist = [LowRankFactor(rng.standard_normal((4, 2)), np.eye(2)),
            LowRankFactor(rng.standard_normal((4, 1)), np.eye(1))]
    prob = assemble_step(snap, bdf_coefficients(2), 0.01, hist)
    assert prob.q == 2 + 2 + 1
    np.testing.assert_allclose(prob.S[2:4, 2:4], 4 / 3 * np.eye(2))
    np.testing.assert_allclose(prob.S[4, 4], -1 / 3)
    with pytest.raises(ValueError):
        assemble_step(snap, bdf_coefficients(3), 0.01, hist)


def test_zero_output_gives_zero_gains(rng):
    sys = random_system(rng)
    zero = TimeVaryingSystem(dim=4, n_inputs=2, n_outputs=2, A=sys.A, M=sys.M, Mdot=sys.Mdot,
                             B_hat=sys.B_hat, C=lambda t: np.zeros((2, 4)), t_end=0.2)
    traj = solve_dre_bdf(zero, np.linspace(0, 0.2, 11), p=2)
    for K in traj.gains:
        np.testing.assert_array_equal(K, np.zeros((2, 4)))


def test_gains_indexed_in_original_time(rng):
    sys = random_system(rng)
    grid = np.linspace(0, 0.2, 41)
    traj = solve_dre_bdf(sys, grid, p=2, keep_factors="all")
    ref = solve_reference(sys, grid, rel_tol=1e-11, abs_tol=1e-20)
    # the first reversed step is BDF1, so the error near t_end is larger
    for k, bound in ((0, 2e-3), (20, 2e-3), (39, 5e-2)):
        assert e_dre(traj.factor_at(k), ref.X[k]) < bound
        K_ref = reference_gain(sys, grid[k], ref.X[k])
        assert np.linalg.norm(traj.gains[k] - K_ref) <= 2 * bound * np.linalg.norm(K_ref)
    np.testing.assert_array_equal(traj.gains[-1], np.zeros((2, 4)))


def test_constant_wrapping_is_bitwise_close(small_laplacian):
    snap = evaluate(small_laplacian, 0.0)
    from riccati_feedback.sysmodel import to_dense
    A, M, B, C = to_dense(snap.A), to_dense(snap.M), small_laplacian.B_hat(0.0), snap.C
    const = TimeVaryingSystem.from_constant(A, M, B, C, t_end=0.1)
    wrapped = TimeVaryingSystem(dim=25, n_inputs=3, n_outputs=1, A=lambda t: A,
                                M=lambda t: M, Mdot=lambda t: np.zeros((25, 25)),
                                B_hat=lambda t: B, C=lambda t: C, t_end=0.1)
    grid = np.linspace(0, 0.1, 17)
    for p in (1, 3):
        a = solve_dre_bdf(const, grid, p=p, n_ord=3)
        b = solve_dre_bdf(wrapped, grid, p=p, n_ord=3)
        for Ka, Kb in zip(a.gains, b.gains):
            assert np.linalg.norm(Ka - Kb) <= 1e-12 * max(np.linalg.norm(Kb), 1e-300)


def test_history_memory_bound(small_laplacian):
    grid = np.linspace(0, 0.1, 33)
    for p in (1, 2, 3, 4):
        traj = solve_dre_bdf(small_laplacian, grid, p=p, n_ord=4)
        assert traj.metadata["peak_history"] <= p + 1
        assert traj.gains[0].shape == (3, 25)


def test_psd_factors(small_laplacian):
    traj = solve_dre_bdf(small_laplacian, np.linspace(0, 0.1, 17), p=2, keep_factors="all")
    for k, f in traj.factors.items():
        if f.s:
            w = np.diag(f.D)
            assert w.min() >= -1e-8 * np.abs(w).max()


def test_terminal_factor_from_weight():
    S = np.diag([4.0, 0.0])
    sys = TimeVaryingSystem.from_constant(-np.eye(2), 2 * np.eye(2), np.ones((2, 1)),
                                          np.eye(2), S=S)
    np.testing.assert_allclose(densify(terminal_factor(sys)), np.diag([1.0, 0.0]), atol=1e-15)
    assert terminal_factor(scalar_system()).s == 0


def test_trajectory_round_trip(tmp_path, small_laplacian):
    traj = solve_dre_bdf(small_laplacian, np.linspace(0, 0.1, 9), p=1, keep_factors="final")
    traj.save(tmp_path / "g", provenance={"hash": "x"})
    back = GainTrajectory.load(tmp_path / "g")
    np.testing.assert_array_equal(back.grid, traj.grid)
    for a, b in zip(back.gains, traj.gains):
        np.testing.assert_array_equal(a, b)
    assert (tmp_path / "g" / "factors" / "L_00000.mtx").exists()
    assert back.metadata["p"] == 1


def test_trajectory_validation():
    with pytest.raises(ValueError):
        GainTrajectory([0.0, 1.0], [np.zeros((1, 2))])
    with pytest.raises(ValueError):
        GainTrajectory([0.0], [np.full((1, 2), np.nan)])
    with pytest.raises(KeyError):
        GainTrajectory([0.0], [np.zeros((1, 2))]).factor_at(0)


def test_non_equidistant_grid_rejected(small_laplacian):
    with pytest.raises(ValueError):
        solve_dre_bdf(small_laplacian, np.array([0.0, 0.01, 0.1]), p=1)


def test_step_failure_carries_partial(monkeypatch, small_laplacian):
    import riccati_feedback.dre_bdf as mod
    from riccati_feedback.are import AreDivergenceError

    calls = {"n": 0}
    real = mod.solve_are

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] > 3:
            raise AreDivergenceError("forced", residual=1.0, trace=[])
        return real(*a, **k)

    monkeypatch.setattr(mod, "solve_are", flaky)
    with pytest.raises(StepFailure) as err:
        solve_dre_bdf(small_laplacian, np.linspace(0, 0.1, 9), p=1)
    assert err.value.partial["completed_steps"] == 3


def test_gain_from_factor_zero():
    sys = scalar_system(b=1.0)
    assert gain_from_factor(evaluate(sys, 0.0), LowRankFactor.zeros(1), 1.0).shape == (1, 1)
