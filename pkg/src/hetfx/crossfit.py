"""Cross-fitted doubly-robust estimation of average and conditional effects.

Nuisance models (propensity and arm-wise outcome regressions) are trained on
fold complements and evaluated out of fold, so every row's nuisance value is
independent of its own observation. Doubly-robust scores built from them give
the average effect with a Wald interval and the pseudo-outcomes consumed by
the curve, additive, and importance estimators.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .dataset import Dataset, FoldAssignment, assign_folds
from .errors import FitError, ParameterError, ValidationError
from .learners import PROB_CLIP, LearnerSpec, fit

__all__ = [
    "DEFAULT_FOLDS",
    "NuisanceEstimates",
    "AteResult",
    "SubgroupEffect",
    "fit_nuisances",
    "estimate_ate",
    "pseudo_cate",
    "subgroup_effects",
]

DEFAULT_FOLDS = 5


@dataclass(frozen=True)
class NuisanceEstimates:
    """Out-of-fold nuisance values: propensity and both arm regressions.

    ``propensity`` is clipped into [0.01, 0.99]; ``mu0``/``mu1`` are the
    predicted outcomes under control and treatment for every row.
    """

    assignment: FoldAssignment
    propensity: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray

    def __post_init__(self):
        n = self.assignment.n
        pi = np.clip(np.asarray(self.propensity, dtype=np.float64).ravel(),
                     PROB_CLIP, 1.0 - PROB_CLIP)
        mu0 = np.asarray(self.mu0, dtype=np.float64).ravel()
        mu1 = np.asarray(self.mu1, dtype=np.float64).ravel()
        if not (pi.shape[0] == mu0.shape[0] == mu1.shape[0] == n):
            raise ValidationError("nuisance arrays must have one entry per row")
        if not (np.isfinite(pi).all() and np.isfinite(mu0).all() and np.isfinite(mu1).all()):
            raise ValidationError("nuisance values must be finite")
        for name, arr in (("propensity", pi), ("mu0", mu0), ("mu1", mu1)):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_arrays(cls, n: int, propensity, mu0, mu1, folds: int = 2,
                    seed: int = 0) -> "NuisanceEstimates":
        """Wrap externally supplied nuisance values (e.g. known truths)."""
        return cls(assignment=assign_folds(n, folds, seed=seed),
                   propensity=propensity, mu0=mu0, mu1=mu1)


def fit_nuisances(data: Dataset, folds: int = DEFAULT_FOLDS, seed: int = 0,
                  propensity_spec: LearnerSpec | None = None,
                  outcome_spec: LearnerSpec | None = None,
                  assignment: FoldAssignment | None = None) -> NuisanceEstimates:
    """Cross-fit the propensity and arm-wise outcome regressions.

    Parameters
    ----------
    data : Dataset
    folds : int
        Number of folds (ignored when ``assignment`` is given).
    seed : int
        Seed for the fold shuffle and any stochastic learners.
    propensity_spec : LearnerSpec, optional
        Model for P(A = 1 | X); logistic regression by default.
    outcome_spec : LearnerSpec, optional
        Model for E[Y | X] within each arm; ordinary least squares by default.
    assignment : FoldAssignment, optional
        Reuse an existing fold assignment.

    Raises
    ------
    FitError
        If some fold complement lacks treated or control units.
    """
    propensity_spec = propensity_spec or LearnerSpec(kind="logistic")
    outcome_spec = outcome_spec or LearnerSpec(kind="linear_ridge")
    fa = assignment if assignment is not None else assign_folds(data.n, folds, seed=seed)
    if fa.n != data.n:
        raise ValidationError("fold assignment does not match the dataset")

    pi = np.empty(data.n)
    mu0 = np.empty(data.n)
    mu1 = np.empty(data.n)
    X, A, Y = data.covariates, data.treatment, data.outcome
    for k in range(fa.folds):
        test = fa.test_mask(k)
        train = ~test
        treated = train & (A == 1.0)
        control = train & (A == 0.0)
        if not treated.any() or not control.any():
            raise FitError(
                f"complement of fold {k} lacks "
                f"{'treated' if not treated.any() else 'control'} units"
            )
        pi_model = fit(propensity_spec, X[train], A[train], task="probability", seed=seed)
        pi[test] = pi_model.predict(X[test])
        mu0[test] = fit(outcome_spec, X[control], Y[control], seed=seed).predict(X[test])
        mu1[test] = fit(outcome_spec, X[treated], Y[treated], seed=seed).predict(X[test])
    return NuisanceEstimates(assignment=fa, propensity=pi, mu0=mu0, mu1=mu1)


def _dr_scores(data: Dataset, nuis: NuisanceEstimates) -> tuple[np.ndarray, np.ndarray]:
    """Doubly-robust scores for the two potential-outcome means."""
    A, Y = data.treatment, data.outcome
    pi, mu0, mu1 = nuis.propensity, nuis.mu0, nuis.mu1
    phi1 = mu1 + A * (Y - mu1) / pi
    phi0 = mu0 + (1.0 - A) * (Y - mu0) / (1.0 - pi)
    return phi0, phi1


@dataclass(frozen=True)
class AteResult:
    """Average treatment effect with a Wald confidence interval."""

    ate: float
    se: float
    ci_lo: float
    ci_hi: float
    alpha: float
    psi0: float
    psi1: float
    n: int
    folds: int


def estimate_ate(data: Dataset, nuis: NuisanceEstimates, alpha: float = 0.05) -> AteResult:
    """Doubly-robust average treatment effect.

    Each potential-outcome mean is the average over folds of the fold means
    of its doubly-robust score; the standard error pools the score
    differences across all rows (population variance over sqrt n).
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError("alpha must be in (0, 1)")
    if nuis.assignment.n != data.n:
        raise ValidationError("nuisance estimates do not match the dataset")
    phi0, phi1 = _dr_scores(data, nuis)
    fa = nuis.assignment
    fold_means0 = np.array([phi0[fa.test_mask(k)].mean() for k in range(fa.folds)])
    fold_means1 = np.array([phi1[fa.test_mask(k)].mean() for k in range(fa.folds)])
    psi0 = float(fold_means0.mean())
    psi1 = float(fold_means1.mean())
    ate = psi1 - psi0
    d = phi1 - phi0
    se = float(np.sqrt(np.var(d) / data.n))
    z = float(norm.ppf(1.0 - alpha / 2.0))
    return AteResult(ate=ate, se=se, ci_lo=ate - z * se, ci_hi=ate + z * se,
                     alpha=float(alpha), psi0=psi0, psi1=psi1, n=data.n, folds=fa.folds)


def pseudo_cate(data: Dataset, nuis: NuisanceEstimates) -> np.ndarray:
    """Doubly-robust pseudo-outcomes whose regression targets the effect curve.

    phi_i = mu1 - mu0 + (A - pi)(Y - mu_A) / (pi (1 - pi)); identical to the
    difference of the two potential-outcome scores.
    """
    if nuis.assignment.n != data.n:
        raise ValidationError("nuisance estimates do not match the dataset")
    A, Y = data.treatment, data.outcome
    pi, mu0, mu1 = nuis.propensity, nuis.mu0, nuis.mu1
    mu_a = np.where(A == 1.0, mu1, mu0)
    return mu1 - mu0 + (A - pi) * (Y - mu_a) / (pi * (1.0 - pi))


@dataclass(frozen=True)
class SubgroupEffect:
    """Average effect within one named subgroup, with a Wald interval."""

    name: str
    estimate: float
    se: float
    ci_lo: float
    ci_hi: float
    n: int


def subgroup_effects(data: Dataset, nuis: NuisanceEstimates, groups: dict,
                     alpha: float = 0.05) -> tuple[SubgroupEffect, ...]:
    """Average effects within named subgroups.

    Parameters
    ----------
    groups : dict
        Maps a subgroup name to a boolean row mask. Every subgroup must be
        non-empty.
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError("alpha must be in (0, 1)")
    if not groups:
        raise ParameterError("need at least one subgroup")
    d = pseudo_cate(data, nuis)
    z = float(norm.ppf(1.0 - alpha / 2.0))
    out = []
    for name, mask in groups.items():
        mask = np.asarray(mask, dtype=bool).ravel()
        if mask.shape[0] != data.n:
            raise ValidationError(f"subgroup {name!r}: mask must have one entry per row")
        m = int(mask.sum())
        if m == 0:
            raise ValidationError(f"subgroup {name!r} is empty")
        est = float(d[mask].mean())
        se = float(np.sqrt(np.var(d[mask]) / m))
        out.append(SubgroupEffect(name=name, estimate=est, se=se,
                                  ci_lo=est - z * se, ci_hi=est + z * se, n=m))
    return tuple(out)
