import numpy as np
import pytest

from panelglmm.families import Family
from panelglmm.panel import PanelLayout
from panelglmm.ridge_em import RidgeConfig
from panelglmm.simulate import (
    SimScenario,
    Table,
    convergence_study,
    default_beta,
    draw_ar1_series,
    generate_panel,
    mse_study,
    rho_recovery_study,
    run_replicates,
)


def _scenario(**kw):
    base = dict(
        layout=PanelLayout(5, 11),
        beta_true=[0.4, -0.3],
        sigma1_sq_true=0.5,
        sigma2_sq_true=0.5,
        rho_true=0.5,
        seed=0,
    )
    base.update(kw)
    return SimScenario(**base)


def _lag1_autocorr(series_matrix):
    a = series_matrix[:, :-1].ravel()
    b = series_matrix[:, 1:].ravel()
    return np.corrcoef(a, b)[0, 1]


class TestGeneratePanel:
    def test_iid_case_lag1_near_zero(self):
        rng = np.random.default_rng(0)
        draws = np.array([draw_ar1_series(rng, 11, 0.5, 0.0) for _ in range(10_000)])
        assert abs(_lag1_autocorr(draws)) < 0.03

    def test_lag1_autocorrelation_matches_rho(self):
        rng = np.random.default_rng(1)
        draws = np.array([draw_ar1_series(rng, 11, 0.5, 0.7) for _ in range(10_000)])
        assert _lag1_autocorr(draws) == pytest.approx(0.7, abs=0.03)

    def test_marginal_variance_matches_stationary_value(self):
        rng = np.random.default_rng(2)
        rho, s2 = 0.6, 0.8
        draws = np.array([draw_ar1_series(rng, 7, s2, rho) for _ in range(10_000)])
        target = s2 / (1 - rho**2)
        assert np.var(draws) == pytest.approx(target, rel=0.05)

    def test_zero_individual_variance_gives_zero_effects(self):
        ds, lat = generate_panel(_scenario(sigma1_sq_true=0.0))
        np.testing.assert_array_equal(lat.xi1, np.zeros(5))

    def test_reproducible_bit_identical(self):
        sc = _scenario(seed=123)
        d1, l1 = generate_panel(sc)
        d2, l2 = generate_panel(sc)
        np.testing.assert_array_equal(d1.y, d2.y)
        np.testing.assert_array_equal(d1.X, d2.X)
        np.testing.assert_array_equal(l1.xi2, l2.xi2)

    def test_family_support_respected(self):
        ds, _ = generate_panel(_scenario())
        assert np.all(ds.y >= 0)
        np.testing.assert_array_equal(ds.y, np.floor(ds.y))
        dsb, _ = generate_panel(_scenario(family=Family("bernoulli-logit")))
        assert set(np.unique(dsb.y)) <= {0.0, 1.0}

    def test_equicorrelated_covariates(self):
        sc = _scenario(layout=PanelLayout(40, 50), beta_true=np.zeros(6), x_correlation=0.5)
        ds, _ = generate_panel(sc)
        corr = np.corrcoef(ds.X.T)
        off = corr[np.triu_indices(6, 1)]
        assert np.abs(off - 0.5).max() < 0.06

    def test_mean_overflow_rejected(self):
        sc = _scenario(beta_true=[50.0, 40.0])
        with pytest.raises(ValueError, match="smaller beta"):
            generate_panel(sc)

    def test_latent_predictor_consistency(self):
        ds, lat = generate_panel(_scenario(family=Family("gaussian-identity", dispersion=1e-12)))
        # with negligible noise, y recovers eta = X b + U xi
        np.testing.assert_allclose(ds.y, lat.eta, atol=1e-5)
        rebuilt = ds.X @ _scenario().beta_true + np.repeat(lat.xi1, 11) + np.tile(lat.xi2, 5)
        np.testing.assert_allclose(lat.eta, rebuilt, atol=1e-12)


class TestStudies:
    def test_convergence_study_single_iteration_with_infinite_tol(self):
        sc = _scenario(n_replicates=2)
        table = convergence_study(sc, RidgeConfig(tol=np.inf, max_outer_iters=50))
        per_rep = {}
        for row in table.rows:
            per_rep.setdefault(row[0], []).append(row[1])
        assert per_rep == {0: [1], 1: [1]}

    def test_gaussian_scenario_converges_fast(self):
        sc = _scenario(
            family=Family("gaussian-identity", dispersion=0.5), n_replicates=3, seed=4
        )
        table = convergence_study(sc, RidgeConfig())
        iters = {}
        for row in table.rows:
            iters[row[0]] = max(iters.get(row[0], 0), row[1])
        assert all(v < 50 for v in iters.values())

    def test_mse_zero_with_truth_estimator_hook(self):
        sc = _scenario(n_replicates=1)

        def truth_fn(dataset, config):
            return (
                {
                    "beta": sc.beta_true,
                    "sigma1_sq": sc.sigma1_sq_true,
                    "sigma2_sq": sc.sigma2_sq_true,
                    "rho": sc.rho_true,
                },
                None,
            )

        table = mse_study(sc, [11, 15], RidgeConfig(), fit_fn=truth_fn)
        assert len(table.rows) == 8  # one row per (T, parameter)
        assert all(row[2] == 0.0 for row in table.rows)

    def test_rho_recovery_null_case_and_determinism(self):
        sc = _scenario(layout=PanelLayout(6, 25), n_replicates=6, seed=11)
        cfg = RidgeConfig(max_outer_iters=200)
        est1, sum1 = rho_recovery_study([0.0], sc, cfg)
        est2, sum2 = rho_recovery_study([0.0], sc, cfg)
        assert est1.rows == est2.rows and sum1.rows == sum2.rows
        medians = {row[0]: row[2] for row in sum1.rows}
        assert abs(medians[0.0]) < 0.25  # loose at this tiny size; acceptance pins 0.1

    def test_run_replicates_records_runtimes_and_mse(self):
        sc = _scenario(n_replicates=3, seed=6)
        res = run_replicates(sc, RidgeConfig())
        assert len(res.estimates) == 3
        assert len(res.runtimes) == 3
        mse = res.mse
        assert set(mse) == {"beta", "sigma1_sq", "sigma2_sq", "rho"}
        assert all(v >= 0 for v in mse.values())


class TestTableAndDefaults:
    def test_table_round_trips_through_csv(self, tmp_path):
        t = Table(columns=("a", "b"), rows=((1, 0.5), (2, -1.25)))
        path = tmp_path / "t.csv"
        t.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "a,b"
        assert lines[1] == "1,0.5"

    def test_default_beta_keeps_predictor_desk_scale(self):
        b = default_beta(40)
        assert b.shape == (40,)
        sc = _scenario(layout=PanelLayout(10, 20), beta_true=b, x_correlation=0.7, seed=0)
        ds, lat = generate_panel(sc)  # must not trip the overflow guard
        assert np.max(np.abs(lat.eta)) <= 8.0

    def test_scenario_validation(self):
        with pytest.raises(ValueError, match="rho"):
            _scenario(rho_true=1.0)
        with pytest.raises(ValueError, match="x_correlation"):
            _scenario(x_correlation=1.0)
        with pytest.raises(ValueError, match="n_replicates"):
            _scenario(n_replicates=0)
