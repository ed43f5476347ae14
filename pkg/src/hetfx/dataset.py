"""Observational-data container, CSV I/O, folds, and derived covariates.

A :class:`Dataset` holds a covariate matrix, a binary treatment indicator,
and an outcome. Everything downstream (cross-fitting, effect curves,
importance) consumes this container plus a :class:`ModifierSpec` naming the
effect modifiers of interest.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import FitError, ParameterError, SchemaError, ValidationError

__all__ = [
    "Dataset",
    "ModifierSpec",
    "FoldAssignment",
    "load_csv",
    "write_csv",
    "assign_folds",
    "derive_risk_score",
    "residualize",
    "modifier_matrix",
]

#: how many offending rows a CSV parse error reports before truncating
_MAX_REPORTED_ROWS = 10


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Covariates, a binary treatment, and an outcome for n units.

    Arrays are validated and frozen read-only at construction; derived
    datasets (fold restrictions, added covariates) are new objects.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    covariate_names: tuple[str, ...]
    treatment_name: str = "treatment"
    outcome_name: str = "outcome"

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=np.float64)
        if cov.ndim != 2:
            raise ValidationError("covariates must be a 2-d array")
        trt = np.asarray(self.treatment, dtype=np.float64).ravel()
        out = np.asarray(self.outcome, dtype=np.float64).ravel()
        n = cov.shape[0]
        if n == 0:
            raise ValidationError("dataset has no rows")
        if trt.shape[0] != n or out.shape[0] != n:
            raise ValidationError("covariates, treatment, and outcome must share length")
        if not (np.isfinite(cov).all() and np.isfinite(out).all()):
            raise ValidationError("covariates and outcome must be finite")
        if not np.isin(trt, (0.0, 1.0)).all():
            raise ValidationError("treatment must be binary 0/1")
        names = tuple(self.covariate_names)
        if len(names) != cov.shape[1]:
            raise ValidationError(
                f"{len(names)} covariate names for {cov.shape[1]} columns"
            )
        all_names = names + (self.treatment_name, self.outcome_name)
        if len(set(all_names)) != len(all_names):
            raise ValidationError("column names must be unique")
        object.__setattr__(self, "covariates", _readonly(cov))
        object.__setattr__(self, "treatment", _readonly(trt))
        object.__setattr__(self, "outcome", _readonly(out))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def column(self, name: str) -> np.ndarray:
        if name == self.treatment_name:
            return self.treatment
        if name == self.outcome_name:
            return self.outcome
        try:
            idx = self.covariate_names.index(name)
        except ValueError:
            raise SchemaError(f"no column named {name!r}") from None
        return self.covariates[:, idx]

    def take(self, rows) -> "Dataset":
        """Dataset restricted to the given row indices (or boolean mask)."""
        rows = np.asarray(rows)
        return replace(
            self,
            covariates=self.covariates[rows],
            treatment=self.treatment[rows],
            outcome=self.outcome[rows],
        )

    def with_covariate(self, name: str, values) -> "Dataset":
        """New dataset with an extra covariate column appended."""
        if name in self.covariate_names + (self.treatment_name, self.outcome_name):
            raise ValidationError(f"column {name!r} already exists")
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.shape[0] != self.n:
            raise ValidationError(f"new column has {values.shape[0]} rows, expected {self.n}")
        return replace(
            self,
            covariates=np.column_stack([self.covariates, values]),
            covariate_names=self.covariate_names + (name,),
        )


@dataclass(frozen=True)
class ModifierSpec:
    """Named effect modifiers and their kinds ("continuous" or "binary")."""

    names: tuple[str, ...]
    kinds: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        kinds = tuple(self.kinds)
        if not names:
            raise ParameterError("need at least one effect modifier")
        if len(set(names)) != len(names):
            raise ParameterError("modifier names must be unique")
        if len(kinds) != len(names):
            raise ParameterError("one kind per modifier name")
        if any(k not in ("continuous", "binary") for k in kinds):
            raise ParameterError("modifier kinds must be 'continuous' or 'binary'")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "kinds", kinds)

    @classmethod
    def infer(cls, data: Dataset, names) -> "ModifierSpec":
        """Infer kinds from the data: binary iff the column only takes 0/1."""
        names = tuple(names)
        kinds = []
        for name in names:
            vals = np.unique(data.column(name))
            kinds.append(
                "binary" if vals.size <= 2 and np.isin(vals, (0.0, 1.0)).all() else "continuous"
            )
        return cls(names=names, kinds=tuple(kinds))

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ParameterError(f"{name!r} is not one of the modifiers {self.names}") from None


def modifier_matrix(data: Dataset, spec: ModifierSpec) -> np.ndarray:
    """(n, d) matrix of modifier columns in spec order."""
    return np.column_stack([data.column(name) for name in spec.names])


@dataclass(frozen=True)
class FoldAssignment:
    """A shuffled partition of n rows into near-equal folds."""

    n: int
    folds: int
    fold_of: np.ndarray
    seed: int

    def __post_init__(self):
        fold_of = np.asarray(self.fold_of, dtype=np.int64)
        if fold_of.shape != (self.n,):
            raise ValidationError("fold_of must have one entry per row")
        counts = np.bincount(fold_of, minlength=self.folds)
        if counts.size != self.folds or (counts == 0).any():
            raise ValidationError("every fold must be non-empty")
        object.__setattr__(self, "fold_of", _readonly(fold_of))

    def test_mask(self, k: int) -> np.ndarray:
        return self.fold_of == k

    def train_mask(self, k: int) -> np.ndarray:
        return self.fold_of != k


def assign_folds(n: int, folds: int, seed: int = 0) -> FoldAssignment:
    """Randomly partition n rows into folds of size differing by at most one."""
    if not 2 <= folds <= n:
        raise ParameterError(f"folds must be in [2, {n}], got {folds}")
    sizes = np.diff(np.linspace(0, n, folds + 1).astype(int))
    fold_of = np.repeat(np.arange(folds), sizes)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D]))
    return FoldAssignment(n=n, folds=folds, fold_of=fold_of[rng.permutation(n)], seed=seed)


# ---------------------------------------------------------------------------
# CSV I/O (stdlib csv; numeric columns only)
# ---------------------------------------------------------------------------


def load_csv(path, treatment: str = "treatment", outcome: str = "outcome",
             covariates=None) -> Dataset:
    """Load a dataset from a headed CSV of numeric columns.

    Parameters
    ----------
    path : str or path-like
    treatment, outcome : str
        Column names for the 0/1 treatment and the outcome.
    covariates : sequence of str, optional
        Covariate columns to keep, in order; all remaining columns when
        omitted.

    Raises
    ------
    SchemaError
        Missing/duplicate header names or no data rows.
    ValidationError
        Ragged rows or non-numeric cells (reported with data row indices),
        non-binary treatment values.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [name.strip() for name in header]
        if len(set(header)) != len(header):
            raise SchemaError(f"{path}: duplicate column names in header")
        wanted = [treatment, outcome] + (list(covariates) if covariates is not None else [])
        missing = [name for name in wanted if name not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}; header has {header}")
        if covariates is None:
            covariates = [name for name in header if name not in (treatment, outcome)]
        covariates = list(covariates)

        rows = []
        bad: list[tuple[int, str]] = []
        for i, row in enumerate(reader):
            if len(row) != len(header):
                raise ValidationError(
                    f"{path}: row {i} has {len(row)} cells, expected {len(header)}"
                )
            parsed = []
            for name, cell in zip(header, row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    bad.append((i, name))
                    parsed.append(np.nan)
            rows.append(parsed)

    if bad:
        shown = ", ".join(f"row {i} column {name!r}" for i, name in bad[:_MAX_REPORTED_ROWS])
        more = f" (+{len(bad) - _MAX_REPORTED_ROWS} more)" if len(bad) > _MAX_REPORTED_ROWS else ""
        raise ValidationError(f"{path}: non-numeric cells at {shown}{more}")
    if not rows:
        raise SchemaError(f"{path}: no data rows")

    table = np.asarray(rows, dtype=np.float64)
    col = {name: table[:, j] for j, name in enumerate(header)}
    return Dataset(
        covariates=np.column_stack([col[name] for name in covariates]),
        treatment=col[treatment],
        outcome=col[outcome],
        covariate_names=tuple(covariates),
        treatment_name=treatment,
        outcome_name=outcome,
    )


def write_csv(data: Dataset, path) -> None:
    """Write a dataset as CSV; floats use shortest round-trip formatting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(data.covariate_names) + [data.treatment_name, data.outcome_name])
        for i in range(data.n):
            cells = [repr(float(x)) for x in data.covariates[i]]
            cells.append(str(int(data.treatment[i])))
            cells.append(repr(float(data.outcome[i])))
            writer.writerow(cells)


# ---------------------------------------------------------------------------
# derived covariates
# ---------------------------------------------------------------------------


def derive_risk_score(data: Dataset, frac: float = 0.02, seed: int = 0,
                      name: str = "risk") -> tuple[Dataset, np.ndarray]:
    """Add a baseline risk score fit on a held-out random subsample.

    A simple random subsample of ``frac`` of the rows trains a logistic
    model of the (binary) outcome on the covariates; the remaining rows get
    that model's predicted probability as a new covariate and form the
    returned dataset, so the score is never evaluated on its own training
    rows.

    Returns
    -------
    (Dataset, ndarray)
        The reduced dataset with the extra column, and the sorted indices
        (into the original rows) of the training subsample that was dropped.
    """
    from .learners import LearnerSpec, fit

    if not 0.0 < frac < 1.0:
        raise ParameterError("frac must be in (0, 1)")
    if not np.isin(np.unique(data.outcome), (0.0, 1.0)).all():
        raise ValidationError("risk scores need a binary outcome")
    m = int(round(frac * data.n))
    if m < 2 or m >= data.n:
        raise ParameterError(
            f"subsample of {m} rows (frac={frac}, n={data.n}) cannot train a risk model"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x215C]))
    perm = rng.permutation(data.n)
    train = np.sort(perm[:m])
    keep = np.sort(perm[m:])
    model = fit(LearnerSpec(kind="logistic"), data.covariates[train],
                data.outcome[train], task="probability")
    score = model.predict(data.covariates[keep])
    return data.take(keep).with_covariate(name, score), train


def residualize(data: Dataset, target: str, smooth_on: str,
                by: str | None = None, suffix: str = "_resid") -> Dataset:
    """Add ``target`` minus a spline smooth of it along ``smooth_on``.

    With ``by`` (a binary covariate), the smooth is fit separately within
    each level. The new column is named ``target + suffix``.
    """
    from .additive import fit_additive

    y = data.column(target)
    x = data.column(smooth_on)
    resid = np.empty(data.n)
    if by is None:
        groups = [np.arange(data.n)]
    else:
        b = data.column(by)
        if not np.isin(np.unique(b), (0.0, 1.0)).all():
            raise ValidationError(f"stratification column {by!r} must be binary 0/1")
        groups = [np.flatnonzero(b == level) for level in (0.0, 1.0)]
    for rows in groups:
        if rows.size == 0:
            continue
        try:
            fit = fit_additive(x[rows, None], y[rows], kinds=("continuous",))
        except (FitError, ValidationError) as exc:
            raise FitError(
                f"residualize {target!r} on {smooth_on!r}: "
                f"stratum of {rows.size} rows cannot support the smoother"
            ) from exc
        resid[rows] = y[rows] - fit.predict(x[rows, None])
    return data.with_covariate(target + suffix, resid)
