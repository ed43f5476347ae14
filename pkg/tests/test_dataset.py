"""Tests for the data container, CSV I/O, folds, and derived covariates."""
import numpy as np
import pytest

from hetfx import dataset as D
from hetfx.errors import FitError, ParameterError, SchemaError, ValidationError


@pytest.fixture()
def small_data():
    rng = np.random.default_rng(0)
    n = 500
    X = rng.normal(size=(n, 3))
    X[:, 1] = (X[:, 1] > 0).astype(float)
    a = (rng.uniform(size=n) < 0.5).astype(float)
    y = X[:, 0] + a + rng.normal(size=n)
    return D.Dataset(covariates=X, treatment=a, outcome=y,
                     covariate_names=("age", "sex", "bmi"))


class TestDataset:
    def test_shapes_and_names(self, small_data):
        assert small_data.n == 500 and small_data.p == 3
        assert small_data.covariate_names == ("age", "sex", "bmi")

    def test_arrays_frozen(self, small_data):
        with pytest.raises(ValueError):
            small_data.covariates[0, 0] = 1.0
        with pytest.raises(ValueError):
            small_data.treatment[0] = 1.0

    def test_column_lookup(self, small_data):
        np.testing.assert_array_equal(small_data.column("sex"), small_data.covariates[:, 1])
        np.testing.assert_array_equal(small_data.column("treatment"), small_data.treatment)
        np.testing.assert_array_equal(small_data.column("outcome"), small_data.outcome)
        with pytest.raises(SchemaError):
            small_data.column("nope")

    def test_take_restricts_rows(self, small_data):
        sub = small_data.take(np.arange(10))
        assert sub.n == 10
        np.testing.assert_array_equal(sub.outcome, small_data.outcome[:10])

    def test_with_covariate_appends(self, small_data):
        new = small_data.with_covariate("extra", np.arange(small_data.n, dtype=float))
        assert new.covariate_names[-1] == "extra"
        assert new.p == small_data.p + 1
        np.testing.assert_array_equal(new.column("age"), small_data.column("age"))

    @pytest.mark.parametrize(
        "mutation",
        [
            dict(treatment=np.full(500, 0.5)),
            dict(outcome=np.full(500, np.nan)),
            dict(covariate_names=("a", "a", "b")),
            dict(covariate_names=("a", "b")),
            dict(treatment_name="age"),
        ],
    )
    def test_invalid_construction(self, small_data, mutation):
        kwargs = dict(
            covariates=small_data.covariates,
            treatment=small_data.treatment,
            outcome=small_data.outcome,
            covariate_names=small_data.covariate_names,
        )
        kwargs.update(mutation)
        with pytest.raises(ValidationError):
            D.Dataset(**kwargs)

    def test_duplicate_new_column_rejected(self, small_data):
        with pytest.raises(ValidationError):
            small_data.with_covariate("age", np.zeros(small_data.n))


class TestModifierSpec:
    def test_infer_kinds(self, small_data):
        spec = D.ModifierSpec.infer(small_data, ("age", "sex"))
        assert spec.kinds == ("continuous", "binary")

    def test_matrix_column_order(self, small_data):
        spec = D.ModifierSpec.infer(small_data, ("bmi", "age"))
        M = D.modifier_matrix(small_data, spec)
        np.testing.assert_array_equal(M[:, 0], small_data.column("bmi"))
        np.testing.assert_array_equal(M[:, 1], small_data.column("age"))

    def test_index_lookup(self, small_data):
        spec = D.ModifierSpec.infer(small_data, ("age", "sex"))
        assert spec.index("sex") == 1
        with pytest.raises(ParameterError):
            spec.index("bmi")

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(names=(), kinds=()),
            dict(names=("v", "v"), kinds=("continuous", "continuous")),
            dict(names=("v",), kinds=("continuous", "binary")),
            dict(names=("v",), kinds=("categorical",)),
        ],
    )
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ParameterError):
            D.ModifierSpec(**kwargs)


class TestFolds:
    @pytest.mark.parametrize("n,folds", [(103, 5), (10, 2), (256, 16)])
    def test_partition_near_equal(self, n, folds):
        fa = D.assign_folds(n, folds, seed=2)
        counts = np.bincount(fa.fold_of, minlength=folds)
        assert counts.sum() == n
        assert counts.max() - counts.min() <= 1

    def test_masks_partition(self):
        fa = D.assign_folds(50, 3, seed=0)
        for k in range(3):
            assert (fa.test_mask(k) ^ fa.train_mask(k)).all()

    def test_deterministic_and_shuffled(self):
        a = D.assign_folds(100, 4, seed=7)
        b = D.assign_folds(100, 4, seed=7)
        c = D.assign_folds(100, 4, seed=8)
        np.testing.assert_array_equal(a.fold_of, b.fold_of)
        assert not np.array_equal(a.fold_of, c.fold_of)
        # shuffled: the first fold is not simply the first block
        assert not (a.fold_of == np.sort(a.fold_of)).all()

    @pytest.mark.parametrize("folds", [1, 0, 11])
    def test_invalid_folds(self, folds):
        with pytest.raises(ParameterError):
            D.assign_folds(10, folds)


class TestCsv(object):
    def test_round_trip_is_exact(self, small_data, tmp_path):
        path = tmp_path / "d.csv"
        D.write_csv(small_data, path)
        back = D.load_csv(path)
        np.testing.assert_array_equal(back.covariates, small_data.covariates)
        np.testing.assert_array_equal(back.treatment, small_data.treatment)
        np.testing.assert_array_equal(back.outcome, small_data.outcome)
        assert back.covariate_names == small_data.covariate_names

    def test_covariate_subset_and_order(self, small_data, tmp_path):
        path = tmp_path / "d.csv"
        D.write_csv(small_data, path)
        sub = D.load_csv(path, covariates=["bmi", "age"])
        assert sub.covariate_names == ("bmi", "age")
        np.testing.assert_array_equal(sub.column("bmi"), small_data.column("bmi"))

    def test_custom_column_names(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x,arm,resp\n1.5,0,2.0\n2.5,1,3.0\n")
        data = D.load_csv(path, treatment="arm", outcome="resp")
        assert data.treatment_name == "arm"
        np.testing.assert_array_equal(data.treatment, [0.0, 1.0])

    def test_missing_columns_reported(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(SchemaError, match="treatment"):
            D.load_csv(path)

    def test_non_numeric_cells_reported_with_rows(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,treatment,outcome\n1,0,2\nx,0,3\n2,1,oops\n")
        with pytest.raises(ValidationError, match="row 1 column 'a'"):
            D.load_csv(path)

    def test_ragged_row_rejected(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,treatment,outcome\n1,0\n")
        with pytest.raises(ValidationError, match="row 0"):
            D.load_csv(path)

    def test_no_data_rows(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,treatment,outcome\n")
        with pytest.raises(SchemaError, match="no data rows"):
            D.load_csv(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("")
        with pytest.raises(SchemaError, match="empty"):
            D.load_csv(path)

    def test_duplicate_header(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,a,treatment,outcome\n1,2,0,3\n")
        with pytest.raises(SchemaError, match="duplicate"):
            D.load_csv(path)

    def test_non_binary_treatment_rejected(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,treatment,outcome\n1,2,3\n")
        with pytest.raises(ValidationError, match="binary"):
            D.load_csv(path)


@pytest.fixture(scope="module")
def binary_outcome_data():
    rng = np.random.default_rng(1)
    n = 10000
    X = rng.normal(size=(n, 4))
    pr = 1.0 / (1.0 + np.exp(-(0.3 * X[:, 0] - 0.5 * X[:, 1])))
    y = (rng.uniform(size=n) < pr).astype(float)
    a = (rng.uniform(size=n) < 0.5).astype(float)
    data = D.Dataset(covariates=X, treatment=a, outcome=y,
                     covariate_names=("age", "sex", "bmi", "lab"))
    return data, pr


class TestRiskScore:
    def test_sizes_follow_fraction(self, binary_outcome_data):
        data, _ = binary_outcome_data
        scored, train = D.derive_risk_score(data, frac=0.02, seed=1)
        assert train.size == 200
        assert scored.n == 9800
        assert scored.covariate_names[-1] == "risk"

    def test_score_tracks_truth_out_of_sample(self, binary_outcome_data):
        data, pr = binary_outcome_data
        scored, train = D.derive_risk_score(data, frac=0.02, seed=1)
        keep = np.setdiff1d(np.arange(data.n), train)
        corr = np.corrcoef(scored.column("risk"), pr[keep])[0, 1]
        assert corr > 0.7

    def test_training_rows_excluded(self, binary_outcome_data):
        data, _ = binary_outcome_data
        scored, train = D.derive_risk_score(data, frac=0.05, seed=3)
        assert scored.n + train.size == data.n

    def test_deterministic(self, binary_outcome_data):
        data, _ = binary_outcome_data
        s1, t1 = D.derive_risk_score(data, frac=0.02, seed=5)
        s2, t2 = D.derive_risk_score(data, frac=0.02, seed=5)
        np.testing.assert_array_equal(t1, t2)
        np.testing.assert_array_equal(s1.column("risk"), s2.column("risk"))

    def test_continuous_outcome_rejected(self, small_data):
        with pytest.raises(ValidationError):
            D.derive_risk_score(small_data)

    @pytest.mark.parametrize("frac", [0.0, 1.0, 0.0001])
    def test_bad_fraction(self, binary_outcome_data, frac):
        data, _ = binary_outcome_data
        with pytest.raises(ParameterError):
            D.derive_risk_score(data, frac=frac)


class TestResidualize:
    def test_residual_orthogonal_to_smooth(self, small_data):
        out = D.residualize(small_data, "bmi", "age")
        resid = out.column("bmi_resid")
        assert abs(resid.mean()) < 1e-10

    def test_stratified_centering(self, small_data):
        out = D.residualize(small_data, "bmi", "age", by="sex")
        resid = out.column("bmi_resid")
        sex = small_data.column("sex")
        assert abs(resid[sex == 0].mean()) < 1e-10
        assert abs(resid[sex == 1].mean()) < 1e-10

    def test_removes_smooth_dependence(self):
        rng = np.random.default_rng(2)
        n = 2000
        age = rng.uniform(-2, 2, n)
        target = np.sin(age) + 0.1 * rng.normal(size=n)
        data = D.Dataset(
            covariates=np.column_stack([age, target]),
            treatment=np.zeros(n), outcome=np.zeros(n),
            covariate_names=("age", "target"),
        )
        out = D.residualize(data, "target", "age")
        resid = out.column("target_resid")
        # correlation with the smooth part should essentially vanish
        assert abs(np.corrcoef(resid, np.sin(age))[0, 1]) < 0.05

    def test_nonbinary_stratifier_rejected(self, small_data):
        with pytest.raises(ValidationError):
            D.residualize(small_data, "bmi", "age", by="age")

    def test_tiny_stratum_raises(self):
        X = np.column_stack([np.arange(6, dtype=float), np.ones(6), np.zeros(6)])
        X[0, 1] = 0.0  # a stratum of one row
        data = D.Dataset(covariates=X, treatment=np.zeros(6), outcome=np.zeros(6),
                         covariate_names=("age", "grp", "bmi"))
        with pytest.raises(FitError):
            D.residualize(data, "bmi", "age", by="grp")
