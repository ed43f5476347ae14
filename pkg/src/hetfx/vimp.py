"""Treatment-effect variable importance.

How much of the detectable effect heterogeneity does a covariate set carry?
For a candidate set V the score contrasts two projections of the
doubly-robust pseudo-outcomes: one onto all covariates and one onto the
covariates with V removed,

    Theta_V = E[(phi - E[phi | X without V])^2 - (phi - E[phi | X])^2],

the heterogeneity variance lost by dropping V. The normalized score
Psi_V = Theta_V / Theta_X divides by the total detectable heterogeneity
(the same contrast with the overall mean in the reduced slot), so the full
covariate set scores exactly one and sets carrying no effect variation
score near zero.

Estimation is honest: nuisances and both projection regressions are fit on
fold complements using in-sample pseudo-outcomes, while the squared-error
contrast is evaluated on held-out rows only; per-row contrasts pool across
folds for Wald inference on Theta_V.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .dataset import Dataset, assign_folds
from .errors import FitError, ParameterError
from .learners import PROB_CLIP, LearnerSpec, fit

__all__ = [
    "DEFAULT_SPLITS",
    "VimpResult",
    "theta_contrast",
    "vimp",
]

#: default number of train/evaluate splits (role-swapped halves)
DEFAULT_SPLITS = 2


@dataclass(frozen=True)
class VimpResult:
    """Importance of one covariate set for effect heterogeneity."""

    subset: tuple[str, ...]
    theta_hat: float
    psi_hat: float
    se_theta: float
    ci_lo: float
    ci_hi: float
    alpha: float
    n_eval: int
    #: negative point estimates are sampling noise around a null effect;
    #: they are reported as-is but marked
    flagged: bool

    @property
    def label(self) -> str:
        return "+".join(self.subset)


def theta_contrast(phi, reduced_pred, full_pred) -> np.ndarray:
    """Per-row squared-error gap between the reduced and full projections."""
    phi = np.asarray(phi, dtype=np.float64)
    reduced_pred = np.asarray(reduced_pred, dtype=np.float64)
    full_pred = np.asarray(full_pred, dtype=np.float64)
    return (phi - reduced_pred) ** 2 - (phi - full_pred) ** 2


def _normalize_subsets(subsets, names) -> list[tuple[str, ...]]:
    known = set(names)
    out = []
    for raw in subsets:
        subset = (raw,) if isinstance(raw, str) else tuple(raw)
        if not subset:
            raise ParameterError("importance subsets must name at least one covariate")
        if len(set(subset)) != len(subset):
            raise ParameterError(f"duplicate covariate in subset {subset!r}")
        missing = [s for s in subset if s not in known]
        if missing:
            raise ParameterError(f"unknown covariates in subset: {missing}")
        out.append(subset)
    if not out:
        raise ParameterError("at least one subset is required")
    return out


def _dr_values(A, Y, pi, mu0, mu1) -> np.ndarray:
    pi = np.clip(pi, PROB_CLIP, 1.0 - PROB_CLIP)
    mu_a = np.where(A == 1.0, mu1, mu0)
    return mu1 - mu0 + (A - pi) * (Y - mu_a) / (pi * (1.0 - pi))


def vimp(data: Dataset, subsets, folds: int = DEFAULT_SPLITS, alpha: float = 0.05,
         seed: int = 0, propensity_spec: LearnerSpec | None = None,
         outcome_spec: LearnerSpec | None = None,
         effect_spec: LearnerSpec | None = None) -> tuple[VimpResult, ...]:
    """Heterogeneity importance of each covariate subset, with Wald intervals.

    Parameters
    ----------
    data : Dataset
    subsets : iterable
        Covariate names (a bare string counts as a singleton set). Naming
        every covariate is allowed and returns psi_hat = 1 exactly.
    folds : int
        Train/evaluate splits; each fold takes one turn as the held-out
        evaluation sample.
    alpha : float
        Wald interval level for theta_hat.
    seed : int
        Drives the fold shuffle and any stochastic learners.
    propensity_spec, outcome_spec : LearnerSpec, optional
        Nuisance learners (logistic / ridge by default).
    effect_spec : LearnerSpec, optional
        Learner for both projection regressions; ridge by default.

    Raises
    ------
    FitError
        If total detectable heterogeneity is not positive ("no detectable
        effect variation"), or a fold complement lacks an arm.
    """
    if folds < 2:
        raise ParameterError("folds must be >= 2")
    if not 0.0 < alpha < 1.0:
        raise ParameterError("alpha must be in (0, 1)")
    names = data.covariate_names
    subsets = _normalize_subsets(subsets, names)
    propensity_spec = propensity_spec or LearnerSpec(kind="logistic")
    outcome_spec = outcome_spec or LearnerSpec(kind="linear_ridge")
    effect_spec = effect_spec or LearnerSpec(kind="linear_ridge")

    keep_cols = {
        subset: np.array([i for i, nm in enumerate(names) if nm not in subset], dtype=np.intp)
        for subset in set(subsets)
    }
    X, A, Y = data.covariates, data.treatment, data.outcome
    n = data.n
    fa = assign_folds(n, folds, seed=seed)

    phi_eval = np.empty(n)
    full_pred = np.empty(n)
    mean_pred = np.empty(n)
    reduced_pred = {subset: np.empty(n) for subset in keep_cols}

    for k in range(fa.folds):
        hold = fa.test_mask(k)
        train = ~hold
        treated = train & (A == 1.0)
        control = train & (A == 0.0)
        if not treated.any() or not control.any():
            raise FitError(
                f"complement of fold {k} lacks "
                f"{'treated' if not treated.any() else 'control'} units"
            )
        pi_model = fit(propensity_spec, X[train], A[train], task="probability", seed=seed)
        m0 = fit(outcome_spec, X[control], Y[control], seed=seed)
        m1 = fit(outcome_spec, X[treated], Y[treated], seed=seed)

        phi_train = _dr_values(A[train], Y[train], pi_model.predict(X[train]),
                               m0.predict(X[train]), m1.predict(X[train]))
        phi_eval[hold] = _dr_values(A[hold], Y[hold], pi_model.predict(X[hold]),
                                    m0.predict(X[hold]), m1.predict(X[hold]))

        full_model = fit(effect_spec, X[train], phi_train, seed=seed)
        full_pred[hold] = full_model.predict(X[hold])
        mean_pred[hold] = phi_train.mean()
        for subset, cols in keep_cols.items():
            if cols.size == 0:
                # dropping everything leaves the constant projection: the
                # same one the denominator uses, making psi exactly one
                reduced_pred[subset][hold] = phi_train.mean()
            else:
                reduced = fit(effect_spec, X[train][:, cols], phi_train, seed=seed)
                reduced_pred[subset][hold] = reduced.predict(X[hold][:, cols])

    d_total = theta_contrast(phi_eval, mean_pred, full_pred)
    theta_total = float(d_total.mean())
    if theta_total <= 0.0:
        raise FitError(
            "no detectable effect variation: the covariate projection does not "
            f"beat the constant fit out of fold (theta_x = {theta_total:.3g})"
        )

    z = float(norm.ppf(1.0 - alpha / 2.0))
    results = []
    for subset in subsets:
        d = theta_contrast(phi_eval, reduced_pred[subset], full_pred)
        theta = float(d.mean())
        se = float(np.sqrt(np.var(d) / n))
        results.append(VimpResult(
            subset=subset, theta_hat=theta, psi_hat=theta / theta_total,
            se_theta=se, ci_lo=theta - z * se, ci_hi=theta + z * se,
            alpha=float(alpha), n_eval=n, flagged=theta < 0.0,
        ))
    return tuple(results)
