import math

import numpy as np
import pytest
import scipy.sparse as sps

from riccati_feedback.sysmodel import (EvaluationError, HorizonError, TimeVaryingSystem,
                                       check_commutation, commutation_generator,
                                       default_commutation_samples, effective_drift, evaluate,
                                       load_matrix_market, save_matrix_market, scalar_preset,
                                       time_reverse, to_dense)

from conftest import random_system


def test_unit_weight_keeps_input_matrix():
    B = np.array([[1.0], [2.0]])
    sys = TimeVaryingSystem.from_constant(-np.eye(2), np.eye(2), B, np.eye(2), lam=1.0)
    np.testing.assert_array_equal(evaluate(sys, 0.3).B, B)


def test_weight_scales_input_by_inverse_root():
    sys = TimeVaryingSystem.from_constant(-np.eye(3), np.eye(3), np.ones((3, 1)), np.eye(3),
                                          lam=4.0)
    np.testing.assert_allclose(evaluate(sys, 0.0).B, 0.5 * np.ones((3, 1)), rtol=0, atol=0)


def test_small_laplacian_mass_at_start(small_laplacian):
    np.testing.assert_allclose(to_dense(evaluate(small_laplacian, 0.0).M), 2 * np.eye(25))


def test_out_of_horizon_raises(small_laplacian):
    with pytest.raises(HorizonError):
        evaluate(small_laplacian, 0.2)


def test_callback_failure_is_wrapped():
    def bad(t):
        raise RuntimeError("boom")
    sys = TimeVaryingSystem(dim=1, n_inputs=1, n_outputs=1, A=bad, M=lambda t: np.eye(1),
                            Mdot=lambda t: np.zeros((1, 1)), B_hat=lambda t: np.eye(1),
                            C=lambda t: np.eye(1))
    with pytest.raises(EvaluationError):
        evaluate(sys, 0.5)


def test_evaluate_is_pure(small_laplacian):
    a, b = evaluate(small_laplacian, 0.037), evaluate(small_laplacian, 0.037)
    np.testing.assert_array_equal(to_dense(a.A), to_dense(b.A))
    np.testing.assert_array_equal(a.B, b.B)


def test_reverse_constant_system_is_identical():
    sys = TimeVaryingSystem.from_constant(-np.eye(2), np.eye(2), np.ones((2, 1)), np.eye(2))
    rev = time_reverse(sys)
    for t in (0.0, 0.4, 1.0):
        np.testing.assert_array_equal(to_dense(evaluate(rev, t).A), to_dense(evaluate(sys, t).A))
        np.testing.assert_array_equal(to_dense(evaluate(rev, t).Mdot), np.zeros((2, 2)))


def test_reversed_mass_at_start_equals_original_at_end(small_laplacian):
    rev = time_reverse(small_laplacian)
    expected = (2 + 0.5 * math.sin(0.2 * math.pi)) * np.eye(25)
    np.testing.assert_allclose(to_dense(evaluate(rev, 0.0).M), expected, rtol=1e-15)


def test_double_reversal_is_identity(small_laplacian):
    back = time_reverse(time_reverse(small_laplacian))
    for t in (0.0, 0.013, 0.07, 0.1):
        s0, s1 = evaluate(small_laplacian, t), evaluate(back, t)
        np.testing.assert_allclose(to_dense(s1.A), to_dense(s0.A), rtol=1e-15)
        np.testing.assert_allclose(to_dense(s1.Mdot), to_dense(s0.Mdot), rtol=1e-15)
        np.testing.assert_allclose(s1.B, s0.B, rtol=1e-15)
        assert s1.orientation == s0.orientation


def test_reversed_mdot_is_negated_derivative(small_laplacian):
    rev = time_reverse(small_laplacian)
    t, h = 0.03, 1e-6
    fd = (to_dense(evaluate(rev, t + h).M) - to_dense(evaluate(rev, t - h).M)) / (2 * h)
    np.testing.assert_allclose(to_dense(evaluate(rev, t).Mdot), fd, atol=1e-6)


def test_effective_drift_without_mass_change():
    sys = TimeVaryingSystem.from_constant(np.diag([-1.0, -2.0]), np.eye(2), np.ones((2, 1)),
                                          np.eye(2))
    np.testing.assert_array_equal(effective_drift(evaluate(sys, 0.5)), np.diag([-1.0, -2.0]))


def test_effective_drift_cancels():
    N = np.array([[0.0, 1.0], [2.0, 0.0]])
    sys = TimeVaryingSystem(dim=2, n_inputs=1, n_outputs=1, A=lambda t: -N,
                            M=lambda t: np.eye(2) + t * N, Mdot=lambda t: N,
                            B_hat=lambda t: np.ones((2, 1)), C=lambda t: np.ones((1, 2)))
    np.testing.assert_array_equal(effective_drift(evaluate(sys, 0.5)), np.zeros((2, 2)))


def test_effective_drift_quarter_period():
    sys = TimeVaryingSystem.from_scalar_scaled(
        alpha=lambda t: 1 + 0.5 * math.sin(2 * math.pi * t), A_bar=-np.eye(2),
        mu=lambda t: 2 + 0.5 * math.sin(2 * math.pi * t),
        dmu=lambda t: math.pi * math.cos(2 * math.pi * t), M_bar=np.eye(2),
        beta=lambda t: 1.0, B_bar=np.ones((2, 1)), gamma=lambda t: 1.0, C_bar=np.ones((1, 2)),
        t_end=1.0)
    snap = evaluate(sys, 0.25)
    np.testing.assert_allclose(effective_drift(snap), to_dense(snap.A), atol=1e-15)


def test_mdot_matches_central_difference(small_laplacian):
    h = 1e-6
    for t in (0.01, 0.05, 0.09):
        fd = (to_dense(small_laplacian.M(t + h)) - to_dense(small_laplacian.M(t - h))) / (2 * h)
        np.testing.assert_allclose(to_dense(small_laplacian.Mdot(t)), fd, atol=1e-6)


def test_validate_passes_and_flags_inconsistent_mdot(rng):
    sys = random_system(rng)
    assert sys.validate()
    bad = TimeVaryingSystem(dim=1, n_inputs=1, n_outputs=1, A=lambda t: -np.eye(1),
                            M=lambda t: (1 + t) * np.eye(1), Mdot=lambda t: np.zeros((1, 1)),
                            B_hat=lambda t: np.eye(1), C=lambda t: np.eye(1))
    with pytest.raises(EvaluationError):
        bad.validate()


def test_missing_mdot_uses_difference_and_is_flagged():
    sys = TimeVaryingSystem(dim=1, n_inputs=1, n_outputs=1, A=lambda t: -np.eye(1),
                            M=lambda t: (1 + t ** 2) * np.eye(1), Mdot=None,
                            B_hat=lambda t: np.eye(1), C=lambda t: np.eye(1))
    assert sys.metadata["mdot_fd"]
    np.testing.assert_allclose(to_dense(evaluate(sys, 0.5).Mdot), [[1.0]], atol=1e-8)


def test_validate_rejects_indefinite_terminal_weight():
    sys = TimeVaryingSystem.from_constant(-np.eye(2), np.eye(2), np.ones((2, 1)), np.eye(2),
                                          S=np.diag([1.0, -1.0]))
    with pytest.raises(EvaluationError):
        sys.validate()


def test_scalar_scaled_commutes(small_laplacian):
    ok, viol = check_commutation(small_laplacian, default_commutation_samples(small_laplacian),
                                 1e-12)
    assert ok


def test_autonomous_commutes():
    A = np.array([[-1.0, 2.0], [0.0, -3.0]])
    sys = TimeVaryingSystem.from_constant(A, np.eye(2), np.ones((2, 1)), np.eye(2))
    assert check_commutation(sys, [(0.0, 1.0), (0.2, 0.7)], 1e-12)[0]


def test_non_commuting_pair_detected():
    A_bar = np.array([[-1.0, 0.0], [0.0, -2.0]])
    N = np.array([[0.0, 1.0], [0.0, 0.0]])
    sys = TimeVaryingSystem(dim=2, n_inputs=1, n_outputs=1, A=lambda t: A_bar + t * N,
                            M=lambda t: np.eye(2), Mdot=lambda t: np.zeros((2, 2)),
                            B_hat=lambda t: np.ones((2, 1)), C=lambda t: np.ones((1, 2)))
    ok, viol = check_commutation(sys, [(0.0, 1.0)], 1e-12)
    Q0, Q1 = (A_bar).T, (A_bar + N).T
    assert not ok
    np.testing.assert_allclose(viol, np.linalg.norm(Q0 @ Q1 - Q1 @ Q0), rtol=1e-14)


def test_commutation_generator_uses_mass():
    sys = TimeVaryingSystem.from_constant(np.diag([-2.0, -4.0]), 2 * np.eye(2),
                                          np.ones((2, 1)), np.eye(2))
    np.testing.assert_allclose(commutation_generator(sys, 0.0), np.diag([-1.0, -2.0]))


def test_scalar_presets():
    f, df = scalar_preset({"kind": "sin-shift", "c": 2.0, "a": 0.5, "w": 2 * math.pi})
    np.testing.assert_allclose(f(0.25), 2.5)
    np.testing.assert_allclose(df(0.0), math.pi)
    g, dg = scalar_preset({"kind": "affine", "a": 1.0, "b": -2.0})
    assert g(0.5) == 0.0 and dg(3.0) == -2.0
    h, dh = scalar_preset(3.0)
    assert h(7.0) == 3.0 and dh(7.0) == 0.0
    c, dc = scalar_preset({"kind": "cos-shift", "c": 3.0, "a": 1.0})
    np.testing.assert_allclose(c(0.0), 4.0)
    with pytest.raises(ValueError):
        scalar_preset({"kind": "cubic"})


def test_matrix_market_round_trip(tmp_path):
    S = sps.random(8, 8, density=0.3, random_state=3, format="csr")
    save_matrix_market(tmp_path / "s.mtx", S)
    np.testing.assert_array_equal(load_matrix_market(tmp_path / "s.mtx").toarray(), S.toarray())
    D = np.arange(6.0).reshape(3, 2)
    save_matrix_market(tmp_path / "d.mtx", D)
    np.testing.assert_array_equal(load_matrix_market(tmp_path / "d.mtx"), D)


def test_invalid_horizon_and_weight():
    with pytest.raises(ValueError):
        TimeVaryingSystem.from_constant(-np.eye(1), np.eye(1), np.eye(1), np.eye(1),
                                        t0=1.0, t_end=1.0)
    with pytest.raises(ValueError):
        TimeVaryingSystem.from_constant(-np.eye(1), np.eye(1), np.eye(1), np.eye(1), lam=0.0)
