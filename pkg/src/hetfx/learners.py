"""Small self-contained regression and probability learners.

Five learner kinds cover the nuisance models: ridge-penalized linear
regression, IRLS logistic regression, k-nearest neighbors, a greedy
variance-reduction regression tree, and a stack that combines members by
non-negative least squares on cross-validated predictions. A semiparametric
conditional density estimator (location-scale model with a kernel density
estimate of the standardized residuals) rounds out the module.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls
from scipy.spatial import cKDTree
from scipy.special import expit

from .errors import (
    DegenerateDensityWarning,
    FitError,
    ParameterError,
    ValidationError,
)

__all__ = [
    "LEARNER_KINDS",
    "TASKS",
    "PROB_CLIP",
    "LearnerSpec",
    "FittedModel",
    "ConditionalDensity",
    "fit",
    "fit_stack",
    "fit_conditional_density",
    "marginal_density",
]

LEARNER_KINDS = ("linear_ridge", "logistic", "knn", "regression_tree", "stack")
TASKS = ("regression", "probability")

#: probability predictions are clipped into [PROB_CLIP, 1 - PROB_CLIP]
PROB_CLIP = 0.01

#: tighter clip used inside the IRLS iterations for numerical stability
_IRLS_CLIP = 1e-6
_IRLS_MAX_ITER = 100
_IRLS_TOL = 1e-8

#: conditional-variance floor, as a fraction of the target's sample variance
VAR_FLOOR_FRAC = 1e-4

#: resolution of the KDE lookup table
_KDE_TABLE_SIZE = 16384


@dataclass(frozen=True)
class LearnerSpec:
    """Declarative description of a learner.

    Only the fields relevant to ``kind`` are read: ``penalty`` for
    linear_ridge, ``k`` for knn, ``max_depth``/``min_leaf`` for
    regression_tree, ``members``/``stack_folds`` for stack.
    """

    kind: str
    penalty: float = 0.0
    k: int = 5
    max_depth: int = 8
    min_leaf: int = 10
    members: tuple["LearnerSpec", ...] = ()
    stack_folds: int = 5

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ParameterError(f"unknown learner kind {self.kind!r}; choose from {LEARNER_KINDS}")
        if self.penalty < 0:
            raise ParameterError("ridge penalty must be >= 0")
        if self.k < 1:
            raise ParameterError("k must be >= 1")
        if self.max_depth < 1 or self.min_leaf < 1:
            raise ParameterError("max_depth and min_leaf must be >= 1")
        if self.kind == "stack":
            if not self.members:
                raise ParameterError("stack requires at least one member spec")
            if any(m.kind == "stack" for m in self.members):
                raise ParameterError("stacks cannot be nested")
            if self.stack_folds < 2:
                raise ParameterError("stack_folds must be >= 2")


def _check_xy(X, y, task):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError("X must be (n, p) with y of length n")
    if X.shape[0] == 0:
        raise ValidationError("cannot fit on an empty sample")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValidationError("X and y must be finite")
    if task not in TASKS:
        raise ParameterError(f"task must be one of {TASKS}, got {task!r}")
    if task == "probability" and not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("probability task requires y in {0, 1}")
    return X, y


class FittedModel:
    """A fitted learner: ``predict`` validates shape and applies task clipping."""

    def __init__(self, spec: LearnerSpec, task: str, n_features: int):
        self.spec = spec
        self.task = task
        self.n_features = n_features

    def _predict_raw(self, X: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValidationError(
                f"predict expected {self.n_features} feature columns, got shape {X.shape}"
            )
        out = self._predict_raw(X)
        if self.task == "probability":
            out = np.clip(out, PROB_CLIP, 1.0 - PROB_CLIP)
        return out


class _LinearModel(FittedModel):
    def __init__(self, spec, task, coef, intercept):
        super().__init__(spec, task, coef.shape[0])
        self.coef = coef
        self.intercept = float(intercept)

    def _predict_raw(self, X):
        return X @ self.coef + self.intercept


class _LogisticModel(FittedModel):
    def __init__(self, spec, task, coef, intercept, converged):
        super().__init__(spec, task, coef.shape[0])
        self.coef = coef
        self.intercept = float(intercept)
        self.converged = converged

    def _predict_raw(self, X):
        return expit(X @ self.coef + self.intercept)


class _KnnModel(FittedModel):
    def __init__(self, spec, task, X, y):
        super().__init__(spec, task, X.shape[1])
        self._tree = cKDTree(X) if X.shape[1] > 0 else None
        self._y = y
        self._k = min(spec.k, X.shape[0])

    def _predict_raw(self, X):
        if self._tree is None:
            return np.full(X.shape[0], self._y.mean())
        _, idx = self._tree.query(X, k=self._k)
        if self._k == 1:
            idx = idx[:, None] if idx.ndim == 1 else idx
        return self._y[idx].mean(axis=1)


class _TreeModel(FittedModel):
    """Flattened binary tree: feature < 0 marks a leaf holding ``value``."""

    def __init__(self, spec, task, feature, threshold, left, right, value):
        super().__init__(spec, task, -1)  # n_features patched by caller
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.value = value

    def _predict_raw(self, X):
        out = np.empty(X.shape[0])
        stack = [(0, np.arange(X.shape[0]))]
        while stack:
            node, rows = stack.pop()
            if rows.size == 0:
                continue
            f = self.feature[node]
            if f < 0:
                out[rows] = self.value[node]
                continue
            goes_left = X[rows, f] <= self.threshold[node]
            stack.append((self.left[node], rows[goes_left]))
            stack.append((self.right[node], rows[~goes_left]))
        return out


class _StackModel(FittedModel):
    def __init__(self, spec, task, members, weights):
        super().__init__(spec, task, members[0].n_features)
        self.members = members
        self.weights = weights

    def _predict_raw(self, X):
        preds = np.column_stack([m.predict(X) for m in self.members])
        return preds @ self.weights


# ---------------------------------------------------------------------------
# individual fitters
# ---------------------------------------------------------------------------


def _fit_linear_ridge(spec, X, y, task):
    n, p = X.shape
    if p == 0:
        return _LinearModel(spec, task, np.empty(0), y.mean())
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    if spec.penalty == 0.0:
        coef, *_ = np.linalg.lstsq(Xc, y - ym, rcond=None)
    else:
        A = Xc.T @ Xc + spec.penalty * np.eye(p)
        coef = np.linalg.solve(A, Xc.T @ (y - ym))
    return _LinearModel(spec, task, coef, ym - xm @ coef)


def _fit_logistic(spec, X, y, task):
    if task != "probability":
        raise ParameterError("logistic learner requires task='probability'")
    classes = np.unique(y)
    if classes.size < 2:
        raise FitError("logistic fit needs both outcome classes present")
    n, p = X.shape
    Z = np.column_stack([np.ones(n), X])
    beta = np.zeros(p + 1)
    beta[0] = np.log(y.mean() / (1.0 - y.mean()))
    converged = False
    for _ in range(_IRLS_MAX_ITER):
        eta = Z @ beta
        mu = np.clip(expit(eta), _IRLS_CLIP, 1.0 - _IRLS_CLIP)
        w = mu * (1.0 - mu)
        A = (Z * w[:, None]).T @ Z
        A[np.diag_indices_from(A)] += spec.penalty + 1e-10
        try:
            step = np.linalg.solve(A, Z.T @ (y - mu))
        except np.linalg.LinAlgError as exc:
            raise FitError("IRLS weighted system is singular") from exc
        beta = beta + step
        if np.max(np.abs(step)) < _IRLS_TOL * (1.0 + np.max(np.abs(beta))):
            converged = True
            break
    return _LogisticModel(spec, task, beta[1:], beta[0], converged)


def _fit_knn(spec, X, y, task):
    return _KnnModel(spec, task, X, y)


def _grow_tree(X, y, spec):
    feature, threshold, left, right, value = [], [], [], [], []

    def best_split(rows):
        yr = y[rows]
        n = rows.size
        base = float(((yr - yr.mean()) ** 2).sum())
        best = (1e-12 * (base + 1.0), -1, 0.0)  # (required gain, feature, threshold)
        for f in range(X.shape[1]):
            order = np.argsort(X[rows, f], kind="stable")
            xs = X[rows[order], f]
            ys = yr[order]
            cs = np.cumsum(ys)
            cq = np.cumsum(ys * ys)
            nl = np.arange(1, n)
            valid = (xs[1:] > xs[:-1]) & (nl >= spec.min_leaf) & ((n - nl) >= spec.min_leaf)
            if not valid.any():
                continue
            sl, sl2 = cs[:-1], cq[:-1]
            sse = (sl2 - sl * sl / nl) + ((cq[-1] - sl2) - (cs[-1] - sl) ** 2 / (n - nl))
            sse[~valid] = np.inf
            i = int(np.argmin(sse))
            gain = base - float(sse[i])
            if gain > best[0]:
                best = (gain, f, 0.5 * (xs[i] + xs[i + 1]))
        return best[1], best[2]

    def build(rows, depth):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[rows].mean()))
        if depth >= spec.max_depth or rows.size < 2 * spec.min_leaf:
            return node
        f, t = best_split(rows)
        if f < 0:
            return node
        goes_left = X[rows, f] <= t
        feature[node] = f
        threshold[node] = t
        left[node] = build(rows[goes_left], depth + 1)
        right[node] = build(rows[~goes_left], depth + 1)
        return node

    build(np.arange(X.shape[0]), 0)
    return (np.array(feature), np.array(threshold), np.array(left),
            np.array(right), np.array(value))


def _fit_tree(spec, X, y, task):
    if X.shape[1] == 0:
        X = np.zeros((X.shape[0], 1))
    model = _TreeModel(spec, task, *_grow_tree(X, y, spec))
    model.n_features = X.shape[1]
    return model


def fit(spec: LearnerSpec, X, y, task: str = "regression", seed: int = 0) -> FittedModel:
    """Fit a learner described by ``spec`` to (X, y).

    Parameters
    ----------
    spec : LearnerSpec
    X : array_like, shape (n, p)
        Feature matrix; p = 0 is allowed and yields a constant model.
    y : array_like, shape (n,)
    task : str
        ``"regression"`` or ``"probability"`` (y must then be 0/1 and
        predictions are clipped into [0.01, 0.99]).
    seed : int
        Only consumed by stack fitting (fold shuffling).
    """
    X, y = _check_xy(X, y, task)
    if spec.kind == "linear_ridge":
        return _fit_linear_ridge(spec, X, y, task)
    if spec.kind == "logistic":
        return _fit_logistic(spec, X, y, task)
    if spec.kind == "knn":
        return _fit_knn(spec, X, y, task)
    if spec.kind == "regression_tree":
        return _fit_tree(spec, X, y, task)
    return fit_stack(spec.members, X, y, task, folds=spec.stack_folds, seed=seed, _spec=spec)


def fit_stack(members, X, y, task: str = "regression", folds: int = 5, seed: int = 0,
              _spec: LearnerSpec | None = None) -> FittedModel:
    """Stack learners with non-negative least squares on out-of-fold predictions.

    Every member is fit on each fold complement and predicts the held-out
    fold; NNLS weights for the member predictions are renormalized onto the
    simplex (an all-zero solution falls back to uniform weights), and members
    are refit on the full sample for prediction.
    """
    members = tuple(members)
    spec = _spec if _spec is not None else LearnerSpec(kind="stack", members=members, stack_folds=folds)
    X, y = _check_xy(X, y, task)
    n = X.shape[0]
    folds = min(folds, n)
    if folds < 2:
        raise ValidationError("stacking needs at least 2 rows")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57AC]))
    fold_of = np.repeat(np.arange(folds), np.diff(np.linspace(0, n, folds + 1).astype(int)))
    fold_of = fold_of[rng.permutation(n)]

    cv_preds = np.empty((n, len(members)))
    for k in range(folds):
        test = fold_of == k
        train = ~test
        if not train.any() or not test.any():
            raise FitError(f"stack fold {k} is empty")
        for j, mspec in enumerate(members):
            try:
                model = fit(mspec, X[train], y[train], task, seed=seed)
                cv_preds[test, j] = model.predict(X[test])
            except FitError:
                cv_preds[test, j] = y[train].mean()

    weights, _ = nnls(cv_preds, y)
    total = weights.sum()
    weights = weights / total if total > 0 else np.full(len(members), 1.0 / len(members))
    fitted = [fit(m, X, y, task, seed=seed) for m in members]
    return _StackModel(spec, task, fitted, weights)


# ---------------------------------------------------------------------------
# conditional density estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionalDensity:
    """Location-scale conditional density of column j given the others.

    f(v | rest) = k((v - mean(rest)) / scale(rest)) / scale(rest), where k is
    either a KDE of the standardized training residuals (``family="kde"``) or
    the standard normal density (``family="gaussian"``).
    """

    j: int
    n_features: int
    mean_model: FittedModel
    var_model: FittedModel
    family: str
    var_floor: float
    bandwidth: float
    n_floored: int
    _table_t: np.ndarray = field(repr=False, default=None)
    _table_f: np.ndarray = field(repr=False, default=None)

    def _split(self, rows):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.shape[1] == self.n_features:
            rest = np.delete(rows, self.j, axis=1)
        elif rows.shape[1] == self.n_features - 1:
            rest = rows
        else:
            raise ValidationError(
                f"conditioning rows must have {self.n_features} (full) or "
                f"{self.n_features - 1} (rest-only) columns, got {rows.shape[1]}"
            )
        return rest

    def location_scale(self, rows):
        """Conditional mean and floored conditional scale for each row."""
        rest = self._split(rows)
        mu = self.mean_model.predict(rest)
        var = np.maximum(self.var_model.predict(rest), self.var_floor)
        return mu, np.sqrt(var)

    def _kernel_density(self, t):
        if self.family == "gaussian":
            return np.exp(-0.5 * t * t) / np.sqrt(2.0 * np.pi)
        return np.interp(t, self._table_t, self._table_f, left=0.0, right=0.0)

    def conditional(self, v, rows, outer: bool = False):
        """Density f(v | rows).

        With ``outer=False`` the evaluation is paired: a scalar ``v`` is
        evaluated against every row, a 1-d ``v`` must supply one value per
        row. With ``outer=True`` the result is the full (len(v), n_rows)
        matrix of f(v_g | row_i).
        """
        mu, sd = self.location_scale(rows)
        v = np.asarray(v, dtype=np.float64)
        if outer:
            v = np.atleast_1d(v)
            t = (v[:, None] - mu[None, :]) / sd[None, :]
            return self._kernel_density(t) / sd[None, :]
        if v.ndim != 0 and v.shape != mu.shape:
            raise ValidationError(
                "paired evaluation needs one v per row; pass outer=True for a grid"
            )
        t = (v - mu) / sd
        return self._kernel_density(t) / sd


def fit_conditional_density(data, j: int, mean_spec: LearnerSpec | None = None,
                            var_spec: LearnerSpec | None = None,
                            family: str = "kde") -> ConditionalDensity:
    """Fit the conditional density of column ``j`` of ``data`` given the rest.

    Parameters
    ----------
    data : array_like, shape (n, d)
        Columns are effect modifiers; column ``j`` must be continuous.
    j : int
        Target column index.
    mean_spec, var_spec : LearnerSpec, optional
        Models for the conditional mean of column j and for the conditional
        variance (fit to squared residuals); both default to linear_ridge.
    family : str
        ``"kde"`` for a kernel estimate of the standardized residual density
        (bandwidth 1.06 * sd * n^(-1/5)), ``"gaussian"`` for a standard
        normal reference.

    Notes
    -----
    Variance predictions are floored at 1e-4 times the sample variance of
    column j; if more than half the rows hit the floor a
    DegenerateDensityWarning is emitted (the density then spikes at the
    conditional mean).
    """
    V = np.asarray(data, dtype=np.float64)
    if V.ndim != 2:
        raise ValidationError("data must be a 2-d array of modifier columns")
    n, d = V.shape
    if n < 50:
        raise ValidationError(f"conditional density needs >= 50 rows, got {n}")
    if not 0 <= j < d:
        raise ParameterError(f"column index {j} out of range for {d} columns")
    if family not in ("kde", "gaussian"):
        raise ParameterError("family must be 'kde' or 'gaussian'")
    if not np.isfinite(V).all():
        raise ValidationError("data must be finite")
    vj = V[:, j]
    if np.unique(vj).size <= 2:
        raise ValidationError(f"column {j} looks binary; conditional density needs a continuous target")

    rest = np.delete(V, j, axis=1)
    mean_spec = mean_spec or LearnerSpec(kind="linear_ridge")
    var_spec = var_spec or LearnerSpec(kind="linear_ridge")
    mean_model = fit(mean_spec, rest, vj, task="regression")
    resid = vj - mean_model.predict(rest)
    var_model = fit(var_spec, rest, resid**2, task="regression")

    var_floor = VAR_FLOOR_FRAC * float(np.var(vj))
    raw_var = var_model.predict(rest)
    n_floored = int((raw_var < var_floor).sum())
    if n_floored > n // 2:
        warnings.warn(
            f"conditional variance hit its floor on {n_floored}/{n} rows; "
            "the density degenerates to spikes at the conditional mean",
            DegenerateDensityWarning,
            stacklevel=2,
        )
    sd = np.sqrt(np.maximum(raw_var, var_floor))
    r = resid / sd
    bw = 1.06 * float(np.std(r, ddof=1)) * n ** (-0.2)
    bw = max(bw, 1e-8)

    table_t = table_f = None
    if family == "kde":
        lo, hi = r.min() - 8.0 * bw, r.max() + 8.0 * bw
        table_t = np.linspace(lo, hi, _KDE_TABLE_SIZE)
        # gaussian KDE of the standardized residuals, evaluated on the table
        # (chunked so the pairwise matrix stays bounded)
        table_f = np.zeros(_KDE_TABLE_SIZE)
        step = max(1, int(4_000_000 // _KDE_TABLE_SIZE))
        for s in range(0, r.size, step):
            z = (table_t[:, None] - r[None, s : s + step]) / bw
            table_f += np.exp(-0.5 * z * z).sum(axis=1)
        table_f /= r.size * bw * np.sqrt(2.0 * np.pi)

    return ConditionalDensity(
        j=j, n_features=d, mean_model=mean_model, var_model=var_model,
        family=family, var_floor=var_floor, bandwidth=bw, n_floored=n_floored,
        _table_t=table_t, _table_f=table_f,
    )


def marginal_density(cd: ConditionalDensity, data, v) -> np.ndarray:
    """Marginal density of column j: average of cd over the rows of ``data``.

    ``v`` may be a scalar or 1-d array; returns an array of the same length.
    """
    V = np.asarray(data, dtype=np.float64)
    if V.ndim == 1:
        V = V[None, :]
    v_arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
    mu, sd = cd.location_scale(V)
    out = np.empty(v_arr.shape[0])
    # chunk over evaluation points; each chunk broadcasts against all rows
    chunk = max(1, int(4_000_000 // max(mu.shape[0], 1)))
    for s in range(0, v_arr.shape[0], chunk):
        t = (v_arr[s : s + chunk, None] - mu[None, :]) / sd[None, :]
        out[s : s + chunk] = (cd._kernel_density(t) / sd[None, :]).mean(axis=1)
    return out
