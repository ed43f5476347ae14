"""Tests for the nuisance learners and the conditional density estimator."""
import numpy as np
import pytest

from hetfx import learners as L
from hetfx.errors import (
    DegenerateDensityWarning,
    FitError,
    ParameterError,
    ValidationError,
)


@pytest.fixture(scope="module")
def linear_data():
    rng = np.random.default_rng(0)
    n, p = 400, 3
    X = rng.normal(size=(n, p))
    beta = np.array([1.5, -2.0, 0.5])
    y = X @ beta + 0.7 + 0.1 * rng.normal(size=n)
    return X, y


class TestLinearRidge:
    def test_zero_penalty_recovers_ols(self, linear_data):
        X, y = linear_data
        m = L.fit(L.LearnerSpec(kind="linear_ridge", penalty=0.0), X, y)
        Z = np.column_stack([np.ones(X.shape[0]), X])
        ols = np.linalg.lstsq(Z, y, rcond=None)[0]
        got = np.concatenate([[m.intercept], m.coef])
        np.testing.assert_allclose(got, ols, atol=1e-10)

    def test_penalty_shrinks_coefficients(self, linear_data):
        X, y = linear_data
        free = L.fit(L.LearnerSpec(kind="linear_ridge", penalty=0.0), X, y)
        shrunk = L.fit(L.LearnerSpec(kind="linear_ridge", penalty=50.0), X, y)
        assert np.linalg.norm(shrunk.coef) < np.linalg.norm(free.coef)

    def test_huge_penalty_approaches_mean(self, linear_data):
        X, y = linear_data
        m = L.fit(L.LearnerSpec(kind="linear_ridge", penalty=1e12), X, y)
        np.testing.assert_allclose(m.predict(X), y.mean(), atol=1e-6)

    def test_no_features_predicts_mean(self):
        y = np.array([1.0, 2.0, 3.0, 6.0])
        m = L.fit(L.LearnerSpec(kind="linear_ridge"), np.empty((4, 0)), y)
        np.testing.assert_allclose(m.predict(np.empty((2, 0))), 3.0)

    def test_1d_feature_accepted(self):
        x = np.linspace(0, 1, 50)
        m = L.fit(L.LearnerSpec(kind="linear_ridge", penalty=0.0), x, 2.0 * x + 1.0)
        np.testing.assert_allclose(m.predict(x), 2.0 * x + 1.0, atol=1e-10)

    def test_probability_task_clips(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(200, 1)) * 10
        y = (X[:, 0] > 0).astype(float)
        m = L.fit(L.LearnerSpec(kind="linear_ridge", penalty=0.0), X, y, task="probability")
        p = m.predict(X)
        assert p.min() >= L.PROB_CLIP and p.max() <= 1.0 - L.PROB_CLIP


class TestLogistic:
    def test_recovers_coefficients(self):
        rng = np.random.default_rng(2)
        n = 20000
        X = rng.normal(size=(n, 2))
        eta = 0.5 + 1.0 * X[:, 0] - 0.5 * X[:, 1]
        y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
        m = L.fit(L.LearnerSpec(kind="logistic"), X, y, task="probability")
        assert m.converged
        np.testing.assert_allclose(m.intercept, 0.5, atol=0.08)
        np.testing.assert_allclose(m.coef, [1.0, -0.5], atol=0.08)

    def test_predictions_clipped(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(500, 1)) * 5
        y = (X[:, 0] > 0).astype(float)  # separable
        m = L.fit(L.LearnerSpec(kind="logistic", penalty=1e-4), X, y, task="probability")
        p = m.predict(X)
        assert p.min() >= L.PROB_CLIP and p.max() <= 1.0 - L.PROB_CLIP

    def test_single_class_raises(self):
        X = np.random.default_rng(4).normal(size=(50, 2))
        with pytest.raises(FitError):
            L.fit(L.LearnerSpec(kind="logistic"), X, np.ones(50), task="probability")

    def test_regression_task_rejected(self):
        X = np.zeros((10, 1))
        y = np.repeat([0.0, 1.0], 5)
        with pytest.raises(ParameterError):
            L.fit(L.LearnerSpec(kind="logistic"), X, y, task="regression")


class TestKnn:
    def test_k1_reproduces_training_values(self, linear_data):
        X, y = linear_data
        m = L.fit(L.LearnerSpec(kind="knn", k=1), X, y)
        np.testing.assert_array_equal(m.predict(X), y)

    def test_k_equals_n_predicts_mean(self, linear_data):
        X, y = linear_data
        m = L.fit(L.LearnerSpec(kind="knn", k=10**6), X, y)
        np.testing.assert_allclose(m.predict(X[:5]), y.mean(), atol=1e-10)

    def test_average_of_known_neighbors(self):
        X = np.array([[0.0], [1.0], [2.0], [10.0]])
        y = np.array([0.0, 1.0, 2.0, 30.0])
        m = L.fit(L.LearnerSpec(kind="knn", k=2), X, y)
        # for x=0.1 the two nearest are 0.0 and 1.0
        np.testing.assert_allclose(m.predict([[0.1]]), [0.5])


class TestTree:
    def test_fits_step_function_exactly(self):
        x = np.linspace(0, 1, 500)[:, None]
        y = np.where(x[:, 0] > 0.5, 1.0, -1.0)
        m = L.fit(L.LearnerSpec(kind="regression_tree", max_depth=3, min_leaf=10), x, y)
        np.testing.assert_array_equal(m.predict(x), y)

    def test_depth_one_is_single_split(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(300, 2))
        y = np.where(X[:, 1] > 0, 2.0, -2.0) + 0.01 * rng.normal(size=300)
        m = L.fit(L.LearnerSpec(kind="regression_tree", max_depth=1, min_leaf=20), X, y)
        preds = m.predict(X)
        assert np.unique(preds).size == 2

    def test_min_leaf_respected(self):
        x = np.arange(20, dtype=float)[:, None]
        y = np.where(x[:, 0] >= 10, 1.0, 0.0)
        m = L.fit(L.LearnerSpec(kind="regression_tree", max_depth=10, min_leaf=8), x, y)
        leaf_of = m.predict(x)
        _, counts = np.unique(leaf_of, return_counts=True)
        assert counts.min() >= 8

    def test_constant_target_single_leaf(self):
        X = np.random.default_rng(6).normal(size=(100, 3))
        m = L.fit(L.LearnerSpec(kind="regression_tree"), X, np.full(100, 4.0))
        np.testing.assert_array_equal(m.predict(X), 4.0)


class TestStack:
    def test_weights_on_simplex(self, linear_data):
        X, y = linear_data
        members = (
            L.LearnerSpec(kind="linear_ridge", penalty=0.0),
            L.LearnerSpec(kind="knn", k=5),
            L.LearnerSpec(kind="regression_tree", max_depth=4),
        )
        m = L.fit_stack(members, X, y, seed=3)
        assert (m.weights >= 0).all()
        assert abs(m.weights.sum() - 1.0) < 1e-8

    def test_weight_concentrates_on_correct_member(self, linear_data):
        # the linear member matches the truth; knn is noise-limited
        X, y = linear_data
        members = (
            L.LearnerSpec(kind="linear_ridge", penalty=0.0),
            L.LearnerSpec(kind="knn", k=5),
        )
        m = L.fit_stack(members, X, y, seed=3)
        assert m.weights[0] > 0.9

    def test_deterministic_given_seed(self, linear_data):
        X, y = linear_data
        members = (L.LearnerSpec(kind="linear_ridge"), L.LearnerSpec(kind="knn", k=5))
        w1 = L.fit_stack(members, X, y, seed=9).weights
        w2 = L.fit_stack(members, X, y, seed=9).weights
        np.testing.assert_array_equal(w1, w2)

    def test_via_fit_with_stack_spec(self, linear_data):
        X, y = linear_data
        spec = L.LearnerSpec(
            kind="stack",
            members=(L.LearnerSpec(kind="linear_ridge"), L.LearnerSpec(kind="knn", k=5)),
        )
        m = L.fit(spec, X, y, seed=3)
        assert abs(m.weights.sum() - 1.0) < 1e-8

    def test_failing_member_gets_fallback(self):
        # logistic on a probability task where one fold could be handled but a
        # constant target makes the member unusable -> mean fallback, weights
        # still on the simplex
        rng = np.random.default_rng(8)
        X = rng.normal(size=(100, 2))
        y = np.zeros(100)
        y[:2] = 1.0  # nearly constant; some training complements see one class
        members = (L.LearnerSpec(kind="logistic"), L.LearnerSpec(kind="knn", k=25))
        m = L.fit_stack(members, X, y, task="probability", folds=50, seed=0)
        assert abs(m.weights.sum() - 1.0) < 1e-8

    def test_nested_stack_rejected(self):
        inner = L.LearnerSpec(kind="stack", members=(L.LearnerSpec(kind="knn"),))
        with pytest.raises(ParameterError):
            L.LearnerSpec(kind="stack", members=(inner,))

    def test_empty_members_rejected(self):
        with pytest.raises(ParameterError):
            L.LearnerSpec(kind="stack", members=())


class TestSpecAndValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(kind="boost"),
            dict(kind="linear_ridge", penalty=-1.0),
            dict(kind="knn", k=0),
            dict(kind="regression_tree", max_depth=0),
            dict(kind="regression_tree", min_leaf=0),
        ],
    )
    def test_bad_spec_rejected(self, kwargs):
        with pytest.raises(ParameterError):
            L.LearnerSpec(**kwargs)

    def test_nan_input_rejected(self):
        X = np.array([[1.0], [np.nan]])
        with pytest.raises(ValidationError):
            L.fit(L.LearnerSpec(kind="knn"), X, np.zeros(2))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            L.fit(L.LearnerSpec(kind="knn"), np.zeros((3, 1)), np.zeros(4))

    def test_nonbinary_probability_target_rejected(self):
        with pytest.raises(ValidationError):
            L.fit(L.LearnerSpec(kind="knn"), np.zeros((3, 1)), np.array([0.0, 0.5, 1.0]),
                  task="probability")

    def test_predict_feature_count_checked(self, linear_data):
        X, y = linear_data
        m = L.fit(L.LearnerSpec(kind="knn", k=3), X, y)
        with pytest.raises(ValidationError):
            m.predict(np.zeros((2, X.shape[1] + 1)))


@pytest.fixture(scope="module")
def density_data():
    """vj | rest ~ N(0.8 r0 - 0.3 r1, 0.5^2) with standard normal rest."""
    rng = np.random.default_rng(0)
    n = 3000
    rest = rng.normal(size=(n, 2))
    vj = 0.8 * rest[:, 0] - 0.3 * rest[:, 1] + 0.5 * rng.normal(size=n)
    return np.column_stack([vj, rest]), rest, vj


class TestConditionalDensity:
    def _truth(self, v, rest):
        mu = 0.8 * rest[:, 0] - 0.3 * rest[:, 1]
        z = (np.atleast_1d(v)[:, None] - mu[None, :]) / 0.5
        return np.exp(-0.5 * z * z) / (0.5 * np.sqrt(2.0 * np.pi))

    @pytest.mark.parametrize("family,tol", [("gaussian", 0.10), ("kde", 0.15)])
    def test_gaussian_linear_recovery(self, density_data, family, tol):
        data, rest, _ = density_data
        cd = L.fit_conditional_density(data, 0, family=family)
        v = np.linspace(-2, 2, 9)
        fhat = cd.conditional(v, rest[:50], outer=True)
        assert np.abs(fhat - self._truth(v, rest[:50])).max() < tol

    def test_kde_integrates_to_one(self, density_data):
        data, rest, vj = density_data
        cd = L.fit_conditional_density(data, 0, family="kde")
        g = np.linspace(float(vj.mean()) - 8.0, float(vj.mean()) + 8.0, 2001)
        f = cd.conditional(g, rest[:5], outer=True)
        np.testing.assert_allclose(np.trapezoid(f, g[:, None], axis=0), 1.0, atol=1e-3)

    def test_paired_evaluation_matches_rowwise(self, density_data):
        data, rest, vj = density_data
        cd = L.fit_conditional_density(data, 0, family="kde")
        paired = cd.conditional(vj[:20], data[:20])
        rowwise = np.array([cd.conditional(float(vj[i]), data[i : i + 1])[0] for i in range(20)])
        np.testing.assert_allclose(paired, rowwise, atol=1e-12)

    def test_full_and_rest_only_rows_agree(self, density_data):
        data, rest, vj = density_data
        cd = L.fit_conditional_density(data, 0, family="gaussian")
        np.testing.assert_array_equal(
            cd.conditional(vj[:10], data[:10]), cd.conditional(vj[:10], rest[:10])
        )

    def test_marginal_density_matches_truth(self, density_data):
        data, _, _ = density_data
        cd = L.fit_conditional_density(data, 0, family="kde")
        v = np.linspace(-2, 2, 9)
        # vj ~ N(0, 0.8^2 + 0.3^2 + 0.5^2)
        s = np.sqrt(0.64 + 0.09 + 0.25)
        truth = np.exp(-0.5 * (v / s) ** 2) / (s * np.sqrt(2.0 * np.pi))
        got = L.marginal_density(cd, data, v)
        assert np.abs(got - truth).max() < 0.05

    def test_degenerate_variance_warns(self, density_data):
        data, rest, vj = density_data
        dup = np.column_stack([vj, vj, rest])  # column 1 predicts column 0 exactly
        with pytest.warns(DegenerateDensityWarning):
            L.fit_conditional_density(dup, 0, family="gaussian")

    def test_variance_floor_applied(self, density_data):
        data, rest, vj = density_data
        dup = np.column_stack([vj, vj, rest])
        with pytest.warns(DegenerateDensityWarning):
            cd = L.fit_conditional_density(dup, 0, family="gaussian")
        _, sd = cd.location_scale(dup[:100])
        assert (sd >= np.sqrt(cd.var_floor) - 1e-12).all()

    @pytest.mark.parametrize(
        "call,err",
        [
            (lambda d: L.fit_conditional_density(d[:10], 0), ValidationError),
            (lambda d: L.fit_conditional_density(d, 5), ParameterError),
            (lambda d: L.fit_conditional_density(d, -1), ParameterError),
            (lambda d: L.fit_conditional_density(d, 0, family="beta"), ParameterError),
        ],
    )
    def test_bad_inputs_rejected(self, density_data, call, err):
        data, _, _ = density_data
        with pytest.raises(err):
            call(data)

    def test_binary_target_rejected(self, density_data):
        data, _, _ = density_data
        binary = data.copy()
        binary[:, 0] = (data[:, 0] > 0).astype(float)
        with pytest.raises(ValidationError):
            L.fit_conditional_density(binary, 0)

    def test_paired_length_mismatch_rejected(self, density_data):
        data, rest, _ = density_data
        cd = L.fit_conditional_density(data, 0, family="gaussian")
        with pytest.raises(ValidationError):
            cd.conditional(np.zeros(3), rest[:50])

    def test_wrong_row_width_rejected(self, density_data):
        data, _, _ = density_data
        cd = L.fit_conditional_density(data, 0, family="gaussian")
        with pytest.raises(ValidationError):
            cd.conditional(0.0, np.zeros((5, 7)))
