"""Partial-dependence pseudo-outcomes, plug-ins, and curves."""
import dataclasses
import warnings

import numpy as np
import pytest
from scipy.special import expit

from hetfx import bands, crossfit, pdcurve
from hetfx.dataset import Dataset, ModifierSpec
from hetfx.errors import DegenerateDensityWarning, ParameterError
from hetfx.learners import LearnerSpec

from tests.test_crossfit import make_data

SPEC = ModifierSpec(names=("v1", "v2"), kinds=("continuous", "continuous"))
RIDGE = LearnerSpec(kind="linear_ridge")


def oracle_nuisances(n, pi, mu0, mu1, folds=2):
    return crossfit.NuisanceEstimates.from_arrays(n, pi, mu0, mu1, folds=folds, seed=0)


@pytest.fixture(scope="module")
def small_pdn():
    rng = np.random.default_rng(3)
    data, pi, mu0, mu1, tau = make_data(1500, rng, rho=0.2)
    nuis = oracle_nuisances(1500, pi, mu0, mu1)
    pdn = pdcurve.build_pd_nuisance(data, SPEC, "v1", nuis, effect_spec=RIDGE,
                                    density_family="gaussian", seed=0)
    return data, nuis, pdn


class TestBuildPdNuisance:
    def test_tau_x_is_the_outcome_regression_contrast(self, small_pdn):
        data, nuis, pdn = small_pdn
        np.testing.assert_array_equal(pdn.tau_x, nuis.mu1 - nuis.mu0)

    def test_shapes_and_finiteness(self, small_pdn):
        data, nuis, pdn = small_pdn
        for arr in (pdn.tau_v, pdn.cond_density, pdn.marg_density, pdn.phi):
            assert arr.shape == (data.n,)
            assert np.isfinite(arr).all()
        assert (pdn.cond_density > 0).all() and (pdn.marg_density > 0).all()

    def test_fold_map_matches_the_nuisance_assignment(self, small_pdn):
        _, nuis, pdn = small_pdn
        np.testing.assert_array_equal(pdn.fold_of, nuis.assignment.fold_of)

    def test_binary_modifier_rejected(self, small_pdn):
        data, nuis, _ = small_pdn
        spec = ModifierSpec(names=("v1", "v2"), kinds=("binary", "continuous"))
        with pytest.raises(ParameterError):
            pdcurve.build_pd_nuisance(data, spec, "v1", nuis)

    def test_needs_a_second_modifier(self, small_pdn):
        data, nuis, _ = small_pdn
        spec = ModifierSpec(names=("v1",), kinds=("continuous",))
        with pytest.raises(ParameterError):
            pdcurve.build_pd_nuisance(data, spec, "v1", nuis)

    def test_default_effect_learner_is_a_stack(self):
        rng = np.random.default_rng(9)
        data, pi, mu0, mu1, tau = make_data(400, rng)
        nuis = oracle_nuisances(400, pi, mu0, mu1)
        pdn = pdcurve.build_pd_nuisance(data, SPEC, "v1", nuis,
                                        density_family="gaussian", seed=0)
        assert all(m.spec.kind == "stack" for m in pdn.tau_models)

    def test_independent_modifiers_give_unit_density_ratio(self):
        rng = np.random.default_rng(40)
        data, pi, mu0, mu1, tau = make_data(5000, rng, rho=0.0)
        nuis = oracle_nuisances(5000, pi, mu0, mu1)
        pdn = pdcurve.build_pd_nuisance(data, SPEC, "v1", nuis, effect_spec=RIDGE,
                                        density_family="gaussian", seed=3)
        ratio = pdn.marg_density / pdn.cond_density
        assert np.abs(ratio - 1.0).max() < 0.2

    @pytest.mark.parametrize("seed", [41, 44])
    def test_unit_ratio_holds_in_the_bulk_across_draws(self, seed):
        rng = np.random.default_rng(seed)
        data, pi, mu0, mu1, tau = make_data(5000, rng, rho=0.0)
        nuis = oracle_nuisances(5000, pi, mu0, mu1)
        pdn = pdcurve.build_pd_nuisance(data, SPEC, "v1", nuis, effect_spec=RIDGE,
                                        density_family="gaussian", seed=3)
        ratio = pdn.marg_density / pdn.cond_density
        assert np.quantile(np.abs(ratio - 1.0), 0.99) < 0.2


class _PickFirstColumn:
    """Stand-in effect-surface model that ignores every other modifier."""

    def predict(self, X):
        return np.asarray(X)[:, 0].astype(np.float64)


def _handmade_pdn(n=40, seed=0):
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(n, 2))
    model = _PickFirstColumn()
    return pdcurve.PdNuisance(
        j=0, modifiers=V, phi=np.zeros(n), tau_x=np.zeros(n), tau_v=V[:, 0].copy(),
        cond_density=np.ones(n), marg_density=np.ones(n),
        fold_of=np.arange(n) % 2, tau_models=(model, model), densities=(None, None),
    )


class TestEffectSurfacePlugins:
    def test_surface_matrix_matches_direct_prediction(self, small_pdn):
        _, _, pdn = small_pdn
        values = np.array([-0.5, 0.0, 1.5])
        surface = pdcurve.tauv_on_rows(pdn, values)
        assert surface.shape == (pdn.modifiers.shape[0], 3)
        for i in (0, 17, 1200):
            k = pdn.fold_of[i]
            rows = np.tile(pdn.modifiers[i], (3, 1))
            rows[:, 0] = values
            np.testing.assert_allclose(surface[i], pdn.tau_models[k].predict(rows))

    def test_theta_is_the_row_average_of_the_surface(self, small_pdn):
        _, _, pdn = small_pdn
        values = np.array([-1.0, 0.25])
        np.testing.assert_allclose(pdcurve.theta_plugin(pdn, values),
                                   pdcurve.tauv_on_rows(pdn, values).mean(axis=0))

    def test_theta_chunking_is_invisible(self, small_pdn):
        _, _, pdn = small_pdn
        values = np.linspace(-2, 2, 7)
        whole = pdcurve.theta_plugin(pdn, values)
        parts = np.concatenate([pdcurve.theta_plugin(pdn, np.atleast_1d(u)) for u in values])
        np.testing.assert_allclose(whole, parts, rtol=0, atol=1e-12)

    def test_theta_equals_tauv_when_surface_ignores_other_modifiers(self):
        pdn = _handmade_pdn()
        values = np.array([0.3, -1.2, 2.0])
        np.testing.assert_allclose(pdcurve.theta_plugin(pdn, values), values,
                                   rtol=0, atol=1e-12)

    def test_oracle_theta_at_one(self):
        # theta_1(v) = v for the correlated-normal pair, so theta(1) = 1
        rng = np.random.default_rng(11)
        data, pi, mu0, mu1, tau = make_data(5000, rng, rho=0.2)
        nuis = oracle_nuisances(5000, pi, mu0, mu1)
        pdn = pdcurve.build_pd_nuisance(data, SPEC, "v1", nuis, effect_spec=RIDGE,
                                        density_family="gaussian", seed=4)
        theta = pdcurve.theta_plugin(pdn, np.array([1.0]))
        assert abs(theta[0] - 1.0) < 0.05


def _noiseless_case(n=600, seed=5):
    """Outcomes that equal the arm regressions exactly (zero residual)."""
    rng = np.random.default_rng(seed)
    V = rng.multivariate_normal([0.0, 0.0], [[1.0, 0.2], [0.2, 1.0]], size=n)
    W = rng.normal(size=n)
    pi = expit(0.4 * W - 0.2 * V[:, 0] - 0.2 * V[:, 1])
    A = (rng.random(n) < pi).astype(np.int64)
    mu0 = 0.5 * W + 0.5 * V[:, 0] - 1.5 * V[:, 1]
    mu1 = W + 1.5 * V[:, 0] - 0.5 * V[:, 1]
    Y = np.where(A == 1, mu1, mu0)
    data = Dataset(covariates=np.column_stack([W, V]), treatment=A, outcome=Y,
                   covariate_names=("w", "v1", "v2"))
    return data, oracle_nuisances(n, pi, mu0, mu1)


class TestPseudoPd:
    def test_zero_residual_and_matched_projections_leave_only_theta(self):
        data, nuis = _noiseless_case()
        pdn = pdcurve.build_pd_nuisance(data, SPEC, "v1", nuis, effect_spec=RIDGE,
                                        density_family="gaussian", seed=0)
        pdn = dataclasses.replace(pdn, tau_v=pdn.tau_x.copy())
        phi = pdcurve.pseudo_pd(data, nuis, pdn)
        np.testing.assert_array_equal(phi, pdcurve.theta_plugin(pdn, pdn.vj))

    def test_unit_ratio_reduces_to_recentred_dr_scores(self, small_pdn):
        data, nuis, pdn = small_pdn
        flat = dataclasses.replace(pdn, cond_density=pdn.marg_density.copy())
        phi = pdcurve.pseudo_pd(data, nuis, flat)
        dr = crossfit.pseudo_cate(data, nuis)
        expected = dr - flat.tau_v + pdcurve.theta_plugin(flat, flat.vj)
        np.testing.assert_allclose(phi, expected, rtol=0, atol=1e-10)

    def test_values_are_finite(self, small_pdn):
        data, nuis, pdn = small_pdn
        assert np.isfinite(pdcurve.pseudo_pd(data, nuis, pdn)).all()

    def test_degenerate_density_warns(self, small_pdn):
        data, nuis, pdn = small_pdn
        crushed = pdn.cond_density.copy()
        k = int(0.06 * data.n)
        crushed[:k] = 1e-9 * pdn.marg_density[:k]
        with pytest.warns(DegenerateDensityWarning):
            pdcurve.pseudo_pd(data, nuis, dataclasses.replace(pdn, cond_density=crushed))

    def test_healthy_density_is_silent(self, small_pdn):
        data, nuis, pdn = small_pdn
        with warnings.catch_warnings():
            warnings.simplefilter("error", DegenerateDensityWarning)
            pdcurve.pseudo_pd(data, nuis, pdn)

    def test_floor_count_monotone_in_threshold(self, small_pdn):
        _, _, pdn = small_pdn
        thresholds = np.geomspace(1e-6, 1.0, 13)
        counts = [(pdn.cond_density < t * pdn.marg_density).sum() for t in thresholds]
        assert (np.diff(counts) >= 0).all()

    def test_double_robustness_smoke(self):
        # each corrupted-nuisance pattern keeps binned means of phi^pd on the
        # partial-dependence truth theta(v) = v; the full-size check lives in
        # the acceptance suite
        n = 8000
        rng = np.random.default_rng(1)
        data, pi, mu0, mu1, tau = make_data(n, rng, rho=0.2)
        v1 = data.column("v1")
        edges = np.linspace(-1.5, 1.5, 6)

        def worst_bin(phi):
            return max(abs(phi[(v1 >= lo) & (v1 < hi)].mean() - v1[(v1 >= lo) & (v1 < hi)].mean())
                       for lo, hi in zip(edges[:-1], edges[1:]))

        mu_wrong = oracle_nuisances(n, pi, np.zeros(n), np.zeros(n))
        pdn = pdcurve.build_pd_nuisance(data, SPEC, "v1", mu_wrong, effect_spec=RIDGE,
                                        density_family="gaussian", seed=1)
        assert worst_bin(pdcurve.pseudo_pd(data, mu_wrong, pdn)) < 0.35

        rest_wrong = oracle_nuisances(n, np.full(n, 0.7), mu0, mu1)
        pdn = pdcurve.build_pd_nuisance(data, SPEC, "v1", rest_wrong, effect_spec=RIDGE,
                                        density_family="gaussian", seed=1)
        wrong_cond = np.exp(-0.5 * v1**2) / np.sqrt(2 * np.pi) * 1.3
        pdn = dataclasses.replace(pdn, cond_density=wrong_cond)
        assert worst_bin(pdcurve.pseudo_pd(data, rest_wrong, pdn)) < 0.35

    def test_pd_and_dr_means_agree_under_independence(self):
        rng = np.random.default_rng(42)
        data, pi, mu0, mu1, tau = make_data(5000, rng, rho=0.0)
        nuis = oracle_nuisances(5000, pi, mu0, mu1)
        pdn = pdcurve.build_pd_nuisance(data, SPEC, "v1", nuis, effect_spec=RIDGE,
                                        density_family="gaussian", seed=3)
        phi_pd = pdcurve.pseudo_pd(data, nuis, pdn)
        phi_dr = crossfit.pseudo_cate(data, nuis)
        assert abs(phi_pd.mean() - phi_dr.mean()) < 0.05


class TestPdCurve:
    def test_oracle_points_on_the_identity_truth(self):
        # single run frozen against a 40-rep MC study: single-run SDs at the
        # three probe points were (0.64, 0.25, 0.41)
        rng = np.random.default_rng(1002)
        data, pi, mu0, mu1, tau = make_data(2000, rng, rho=0.2)
        nuis = oracle_nuisances(2000, pi, mu0, mu1)
        grid = np.array([-1.0, 0.0, 1.0])
        band, _ = pdcurve.pd_curve(data, SPEC, "v1", nuis, grid=grid,
                                   density_family="gaussian", seed=2)
        err = np.abs(band.estimate - grid)
        assert (err < 3 * np.array([0.64, 0.25, 0.41])).all()

    def test_flat_pd_but_sloped_conditional_under_correlation(self):
        # when all heterogeneity sits on the other modifier, the
        # partial-dependence curve is flat while the conditional curve
        # inherits the correlation-induced slope
        rho, n = 0.6, 10000
        rng = np.random.default_rng(1)
        V = rng.multivariate_normal([0.0, 0.0], [[1.0, rho], [rho, 1.0]], size=n)
        W = rng.normal(size=n)
        pi = expit(0.4 * W - 0.2 * V[:, 0] - 0.2 * V[:, 1])
        A = (rng.random(n) < pi).astype(np.int64)
        mu0 = 0.5 * W
        mu1 = mu0 + V[:, 1]
        Y = np.where(A == 1, mu1, mu0) + 0.5 * rng.normal(size=n)
        data = Dataset(covariates=np.column_stack([W, V]), treatment=A, outcome=Y,
                       covariate_names=("w", "v1", "v2"))
        nuis = oracle_nuisances(n, pi, mu0, mu1)

        band, _ = pdcurve.pd_curve(data, SPEC, "v1", nuis, effect_spec=RIDGE,
                                   density_family="gaussian", seed=1)
        sub = np.abs(band.grid) <= 1.0
        pd_slope = np.polyfit(band.grid[sub], band.estimate[sub], 1)[0]
        assert abs(pd_slope) < 0.1

        cate_band = bands.effect_curve(V[:, 0], crossfit.pseudo_cate(data, nuis), seed=1)
        csub = np.abs(cate_band.grid) <= 1.0
        cate_slope = np.polyfit(cate_band.grid[csub], cate_band.estimate[csub], 1)[0]
        assert abs(cate_slope - rho) < 0.15

    def test_out_of_support_grid_points_reported_not_fatal(self, small_pdn):
        data, nuis, pdn = small_pdn
        band, _ = pdcurve.pd_curve(data, SPEC, "v1", nuis, pdn=pdn,
                                   grid=np.array([-1.0, 0.0, 1.0, 50.0]), h=0.8, seed=0)
        np.testing.assert_array_equal(band.grid, [-1.0, 0.0, 1.0])
        assert len(band.diagnostics) == 1 and "grid[3]" in band.diagnostics[0]

    def test_uniform_band_contains_pointwise(self, small_pdn):
        data, nuis, pdn = small_pdn
        band, _ = pdcurve.pd_curve(data, SPEC, "v1", nuis, pdn=pdn, seed=0)
        assert band.kind == "pd"
        assert band.crit_uniform >= band.crit_pointwise
        assert (band.uniform_lo <= band.pointwise_lo).all()
        assert (band.pointwise_hi <= band.uniform_hi).all()

    def test_same_seed_reproduces_the_band(self, small_pdn):
        data, nuis, pdn = small_pdn
        one, _ = pdcurve.pd_curve(data, SPEC, "v1", nuis, pdn=pdn, seed=7)
        two, _ = pdcurve.pd_curve(data, SPEC, "v1", nuis, pdn=pdn, seed=7)
        np.testing.assert_array_equal(one.estimate, two.estimate)
        np.testing.assert_array_equal(one.uniform_lo, two.uniform_lo)
        assert one.crit_uniform == two.crit_uniform
