import numpy as np
import pytest

from panelglmm.ar1 import (
    Ar1Params,
    ar1_covariance,
    ar1_logdet,
    ar1_precision,
    profile_ml_update,
    profile_objective,
)


def test_covariance_no_serial_correlation():
    np.testing.assert_allclose(ar1_covariance(Ar1Params(0.0, 2.0), 3), 2.0 * np.eye(3))


def test_covariance_marginal_scaling():
    cov = ar1_covariance(Ar1Params(0.5, 0.75), 2)
    np.testing.assert_allclose(cov, [[1.0, 0.5], [0.5, 1.0]])


def test_precision_formula_t3():
    prec = ar1_precision(Ar1Params(0.5, 1.0), 3)
    np.testing.assert_allclose(prec, [[1.0, -0.5, 0.0], [-0.5, 1.25, -0.5], [0.0, -0.5, 1.0]])


def test_precision_iid_case():
    np.testing.assert_allclose(ar1_precision(Ar1Params(0.0, 0.25), 4), 4.0 * np.eye(4))


@pytest.mark.parametrize("rho,T", [(0.3, 4), (-0.8, 8), (0.95, 6), (0.5, 2)])
def test_precision_matches_dense_inverse(rho, T):
    params = Ar1Params(rho, 1.3)
    dense_inv = np.linalg.inv(ar1_covariance(params, T))
    np.testing.assert_allclose(ar1_precision(params, T), dense_inv, atol=1e-10)


def test_covariance_times_precision_is_identity():
    rng = np.random.default_rng(0)
    for _ in range(25):
        rho = rng.uniform(-0.95, 0.95)
        s2 = rng.uniform(0.1, 5.0)
        T = rng.integers(2, 51)
        params = Ar1Params(rho, s2)
        prod = ar1_covariance(params, T) @ ar1_precision(params, T)
        assert np.abs(prod - np.eye(T)).max() < 1e-10


def test_logdet_trivial_and_one_point():
    assert ar1_logdet(Ar1Params(0.0, 1.0), 5) == pytest.approx(0.0)
    assert ar1_logdet(Ar1Params(0.5, 1.0), 1) == pytest.approx(-np.log(0.75))


def test_logdet_matches_dense():
    rng = np.random.default_rng(1)
    for _ in range(20):
        params = Ar1Params(rng.uniform(-0.9, 0.9), rng.uniform(0.2, 3.0))
        T = int(rng.integers(2, 51))
        _, dense = np.linalg.slogdet(ar1_covariance(params, T))
        assert abs(ar1_logdet(params, T) - dense) < 1e-9


def test_stationarity_guard():
    with pytest.raises(ValueError):
        Ar1Params(1.0, 1.0)
    with pytest.raises(ValueError):
        Ar1Params(0.5, -1.0)


def test_profile_update_plugin_fixed_point():
    # S2 equal to a model covariance is maximised exactly at its parameters
    truth = Ar1Params(0.6, 0.8)
    est = profile_ml_update(ar1_covariance(truth, 50))
    assert est.rho == pytest.approx(0.6, abs=1e-3)
    assert est.sigma2_sq == pytest.approx(0.8, abs=1e-3)


def test_profile_update_identity_moment():
    est = profile_ml_update(np.eye(60))
    assert est.rho == pytest.approx(0.0, abs=1e-3)
    assert est.sigma2_sq == pytest.approx(1.0, abs=1e-3)


def _dense_objective(S2, rho, sigma2_sq):
    # independent oracle: dense logdet and solve, no tridiagonal shortcuts
    T = S2.shape[0]
    idx = np.arange(T)
    cov = sigma2_sq / (1 - rho**2) * rho ** np.abs(idx[:, None] - idx[None, :])
    sign, logdet = np.linalg.slogdet(cov)
    return -0.5 * (logdet + np.trace(np.linalg.solve(cov, S2)))


def test_profile_update_beats_brute_force_grid():
    rng = np.random.default_rng(7)
    for _ in range(3):
        A = rng.standard_normal((3, 3))
        S2 = A @ A.T + 0.1 * np.eye(3)
        est = profile_ml_update(S2)
        obj_hat = _dense_objective(S2, est.rho, est.sigma2_sq)
        rhos = np.arange(-0.99, 0.9901, 1e-3)
        sigmas = np.exp(np.linspace(np.log(np.trace(S2) / 3) - 3, np.log(np.trace(S2) / 3) + 3, 200))
        best = -np.inf
        best_rho = None
        for r in rhos[::10]:
            vals = [_dense_objective(S2, r, s) for s in sigmas]
            m = max(vals)
            if m > best:
                best, best_rho = m, r
        assert obj_hat >= best - 1e-6
        assert abs(est.rho - best_rho) < 2e-2  # coarse-grid localisation


def test_profile_objective_consistent_with_dense():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((6, 6))
    S2 = A @ A.T
    for rho, s2 in [(0.4, 1.2), (-0.6, 0.3)]:
        assert profile_objective(S2, rho, s2) == pytest.approx(_dense_objective(S2, rho, s2), rel=1e-10)


def test_profile_update_dominates_verification_grid():
    rng = np.random.default_rng(11)
    A = rng.standard_normal((8, 8))
    S2 = A @ A.T + 0.05 * np.eye(8)
    est = profile_ml_update(S2)
    obj_hat = profile_objective(S2, est.rho, est.sigma2_sq)
    rhos = np.linspace(-0.99, 0.99, 100)
    sigmas = np.exp(np.linspace(np.log(np.trace(S2) / 8) - 2, np.log(np.trace(S2) / 8) + 2, 100))
    grid_best = max(profile_objective(S2, r, s) for r in rhos for s in sigmas)
    assert obj_hat >= grid_best - 1e-9


def test_closed_form_sigma_zeroes_partial_derivative():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((5, 5))
    S2 = A @ A.T
    est = profile_ml_update(S2)
    h = 1e-6
    d = (
        profile_objective(S2, est.rho, est.sigma2_sq + h)
        - profile_objective(S2, est.rho, est.sigma2_sq - h)
    ) / (2 * h)
    assert abs(d) < 1e-4


def test_degenerate_moment_rejected():
    with pytest.raises(ValueError, match="trace"):
        profile_ml_update(np.zeros((4, 4)))
