import math

import numpy as np
import pytest
import scipy.sparse as sps

from riccati_feedback.bench import (BENCHMARK_DEFAULTS, BenchmarkSpec, SurrogateParams,
                                    build_conduction_tv, build_small_laplacian,
                                    build_surrogate_nl, conductivity, eoc, laplacian_2d)
from riccati_feedback.closedloop import ClosedLoopSystem, simulate
from riccati_feedback.dre_bdf import GainTrajectory
from riccati_feedback.sysmodel import (TimeVaryingSystem, check_commutation,
                                       default_commutation_samples, evaluate,
                                       load_matrix_market, save_matrix_market, to_dense)


def test_small_laplacian_shape_and_mass():
    sys = build_small_laplacian()
    assert sys.dim == 25 and sys.n_inputs == 3 and sys.n_outputs == 1
    np.testing.assert_allclose(to_dense(evaluate(sys, 0.0).M), 2 * np.eye(25), rtol=1e-15)
    np.testing.assert_allclose(to_dense(evaluate(sys, 0.05).M),
                               (2 + 0.5 * math.sin(0.1 * math.pi)) * np.eye(25), rtol=1e-15)
    np.testing.assert_allclose(to_dense(evaluate(sys, 0.0).Mdot), math.pi * np.eye(25),
                               rtol=1e-12)
    assert (sys.t0, sys.t_end) == (0.0, 0.1)
    assert np.count_nonzero(to_dense(sys.S)) == 0


def test_small_laplacian_coefficients():
    sys = build_small_laplacian()
    A_hat = laplacian_2d(5).toarray()
    t = 0.03
    snap = evaluate(sys, t)
    np.testing.assert_allclose(to_dense(snap.A), (1 + 0.5 * math.sin(2 * math.pi * t)) * A_hat,
                               rtol=1e-14)
    assert np.count_nonzero(snap.B.sum(axis=1)) == 3
    np.testing.assert_allclose(snap.C, np.full((1, 25), (1 - t) / 25), rtol=1e-14)


def test_laplacian_stencil():
    L = laplacian_2d(5).toarray()
    h2 = 36.0
    np.testing.assert_allclose(np.diag(L), -4 * h2)
    np.testing.assert_allclose(L, L.T)
    assert np.linalg.eigvalsh(L).max() < 0
    # interior node 12 has four neighbours
    assert np.count_nonzero(L[12]) == 5
    np.testing.assert_allclose(L[12].sum(), 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        laplacian_2d(4, bc="robin")


def test_neumann_laplacian_annihilates_constants():
    L = laplacian_2d(6, bc="neumann")
    np.testing.assert_allclose(L @ np.ones(36), 0.0, atol=1e-10)


def test_small_laplacian_commutes():
    sys = build_small_laplacian()
    ok, _ = check_commutation(sys, default_commutation_samples(sys))
    assert ok


def test_small_laplacian_guard():
    with pytest.raises(ValueError):
        build_small_laplacian(1)


def test_conductivity_values():
    np.testing.assert_allclose(conductivity(0.0), 26.7, rtol=1e-15)
    np.testing.assert_allclose(conductivity(2250.0), 26.5, rtol=1e-15)


def test_conduction_tv_structure():
    sys = build_conduction_tv()
    assert (sys.dim, sys.n_inputs, sys.n_outputs) == (100, 7, 6)
    assert sys.t_end == 4500.0 and sys.lam == 1.0
    C = sys.C(0.0)
    np.testing.assert_allclose(C.sum(axis=1), 1.0)
    B = sys.B_hat(0.0)
    assert np.all(B.sum(axis=0) > 0)
    # every boundary segment is disjoint
    assert np.all((B > 0).sum(axis=1) <= 1)
    A0 = to_dense(evaluate(sys, 0.0).A)
    assert np.linalg.eigvals(A0).real.max() < 0


def test_conduction_tv_commutation():
    const = build_conduction_tv(kappa_const=True)
    ok, worst = check_commutation(const, default_commutation_samples(const))
    assert ok and worst == 0.0
    varying = build_conduction_tv()
    ok, _ = check_commutation(varying, default_commutation_samples(varying))
    assert not ok


def test_conduction_tv_errors():
    with pytest.raises(ValueError):
        build_conduction_tv(n_side=3)
    with pytest.raises(ValueError):
        build_conduction_tv(n_side=5, m=40)
    with pytest.raises(ValueError):
        build_conduction_tv(n_side=5, p=6)


def test_generators_are_deterministic():
    a, b = build_conduction_tv(), build_conduction_tv()
    np.testing.assert_array_equal(to_dense(a.A(10.0)), to_dense(b.A(10.0)))
    np.testing.assert_array_equal(a.C(0.0), b.C(0.0))


def test_matrix_market_export(tmp_path):
    sys = build_conduction_tv(n_side=5, m=4, p=3)
    A = sys.A(0.0)
    save_matrix_market(tmp_path / "A.mtx", A)
    save_matrix_market(tmp_path / "B.mtx", sys.B_hat(0.0))
    A2 = load_matrix_market(tmp_path / "A.mtx")
    assert sps.issparse(A2)
    np.testing.assert_allclose(A2.toarray(), A.toarray(), rtol=1e-15)
    np.testing.assert_allclose(load_matrix_market(tmp_path / "B.mtx"), sys.B_hat(0.0),
                               rtol=1e-15)


def _zero_gains(m, n, t_end, steps):
    grid = np.linspace(0, t_end, steps + 1)
    return GainTrajectory(grid, [np.zeros((m, n))] * len(grid))


def test_surrogate_shapes():
    cls, lin = build_surrogate_nl()
    assert isinstance(cls, ClosedLoopSystem) and isinstance(lin, TimeVaryingSystem)
    assert cls.dim == lin.dim == 225 and lin.n_inputs == 1 and lin.n_outputs == 2
    assert (cls.t0, cls.t_end) == (0.0, 1.0) and cls.lam == 1e-4
    np.testing.assert_allclose(cls.perturbation(0.2), 1.0)
    with pytest.raises(ValueError):
        build_surrogate_nl(4)


def test_surrogate_rest_without_pulse():
    cls, _ = build_surrogate_nl(5, params=SurrogateParams(phi0=0.0))
    grid = np.linspace(0, 1, 41)
    r = simulate(cls, _zero_gains(1, 25, 1.0, 40), "FT", grid)
    assert r.outcome == "completed"
    assert np.abs(r.states).max() == 0.0


def test_surrogate_linear_schemes_agree():
    cls, _ = build_surrogate_nl(5, params=SurrogateParams(eta=0.0))
    fine_grid = np.linspace(0, 1, 1601)
    ref = simulate(cls, _zero_gains(1, 25, 1.0, 1600), "FT", fine_grid).states
    errs = []
    for n in (200, 400):
        grid = np.linspace(0, 1, n + 1)
        ie = simulate(cls, _zero_gains(1, 25, 1.0, n), "IE", grid).states
        ft = simulate(cls, _zero_gains(1, 25, 1.0, n), "FT", grid).states
        stride = 1600 // n
        errs.append(np.abs(ie - ref[::stride]).max())
        assert np.abs(ie - ft).max() <= 0.1 * np.abs(ref).max()
    order = eoc(errs)[0]
    assert 0.8 <= order <= 1.2


def test_eoc_examples():
    np.testing.assert_allclose(eoc([1e-2, 2.5e-3]), [2.0], rtol=1e-14)
    np.testing.assert_allclose(eoc([0.4, 0.2, 0.1]), [1.0, 1.0], rtol=1e-14)
    np.testing.assert_allclose(eoc([0.3, 0.3]), [0.0], atol=1e-15)
    np.testing.assert_allclose(eoc([(0.3, 9e-2), (0.1, 1e-2)]), [2.0], rtol=1e-13)
    with pytest.raises(ValueError):
        eoc([1e-2, 0.0])
    with pytest.raises(ValueError):
        eoc([1e-2])


def test_benchmark_spec():
    spec = BenchmarkSpec("small_laplacian", {"grid_side": 3})
    assert spec.resolved["grid_side"] == 3 and spec.resolved["n_t"] == 128
    assert spec.build().dim == 9
    lin, cls = BenchmarkSpec("surrogate_nl", {"n_side": 5, "eta": 0.0}).build()
    assert lin.dim == cls.dim == 25
    assert BENCHMARK_DEFAULTS["surrogate_nl"]["coupling"] == "lagged"
    assert BENCHMARK_DEFAULTS["surrogate_nl"]["n_t"] == 400
    with pytest.raises(ValueError):
        BenchmarkSpec("steel")
    with pytest.raises(ValueError):
        BenchmarkSpec("small_laplacian", {"n_side": 4})
