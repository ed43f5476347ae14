"""Partial-dependence effect curves.

The conditional effect curve along one modifier averages the treatment
effect among units *observed* at that modifier value; correlated modifiers
make it drift with the background composition. The partial-dependence curve
instead averages the full conditional-effect surface over the marginal
distribution of the other modifiers:

    theta_j(v) = E[ tau(v, V_others) ].

Estimation reweights the doubly-robust residuals by the density ratio
f_j(v) / f_j(v | others) and re-centers with a cross-fitted plug-in of the
effect surface; the result is consistent when either the outcome
regressions or both the propensity and the conditional density are correct.

Strongly dependent modifiers make the density ratio heavy-tailed (for a
bivariate normal pair its second moment diverges once |corr| >= 0.5), so a
handful of rows can dominate the pseudo-outcomes and pull the bandwidth
selector toward near-global fits. Supplying a moderate fixed bandwidth, or
reading the curve away from the support edges, is advisable in that regime;
the ratio floor only guards outright density degeneracy.
"""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np

from . import localpoly
from .bands import DEFAULT_DRAWS, CurveEstimate, eif_pd, grid_cell_weights, uniform_band
from .crossfit import NuisanceEstimates, pseudo_cate
from .dataset import Dataset, ModifierSpec, modifier_matrix
from .errors import DegenerateDensityWarning, NumericError, ParameterError, ValidationError
from .learners import ConditionalDensity, FittedModel, LearnerSpec, fit, fit_conditional_density

__all__ = [
    "RATIO_FLOOR",
    "PdNuisance",
    "build_pd_nuisance",
    "pseudo_pd",
    "tauv_on_rows",
    "theta_plugin",
    "pd_curve",
]

#: the conditional density in the ratio denominator is floored at this
#: fraction of the marginal density at the same point
RATIO_FLOOR = 1e-3

#: fraction of floored rows above which a degeneracy warning is emitted
_FLOOR_WARN_FRAC = 0.05


@dataclass(frozen=True)
class PdNuisance:
    """Cross-fitted ingredients of the partial-dependence pseudo-outcome.

    ``tau_x`` is the plug-in effect mu1 - mu0 at each row; ``tau_v`` its
    regression onto the modifiers. All per-row values are out of fold: the
    projections and the conditional density for a row were trained on its
    fold complement.
    """

    j: int
    modifiers: np.ndarray
    phi: np.ndarray
    tau_x: np.ndarray
    tau_v: np.ndarray
    cond_density: np.ndarray
    marg_density: np.ndarray
    fold_of: np.ndarray
    tau_models: tuple[FittedModel, ...]
    densities: tuple[ConditionalDensity, ...]

    @property
    def vj(self) -> np.ndarray:
        return self.modifiers[:, self.j]


def _marginal_density(density, v, rows, budget: int = 4_000_000) -> np.ndarray:
    """Mean of f(v_g | row_i) over rows, chunked so the outer product
    never exceeds ``budget`` floats at once."""
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    out = np.empty(v.shape[0])
    step = max(1, budget // max(len(rows), 1))
    for start in range(0, v.shape[0], step):
        stop = start + step
        out[start:stop] = density.conditional(v[start:stop], rows, outer=True).mean(axis=1)
    return out


def build_pd_nuisance(data: Dataset, spec: ModifierSpec, modifier: str,
                      nuis: NuisanceEstimates,
                      effect_spec: LearnerSpec | None = None,
                      density_family: str = "kde",
                      seed: int = 0) -> PdNuisance:
    """Cross-fit the effect projections and densities for one modifier.

    The covariate-level effect tau_x is the contrast of the two out-of-fold
    outcome regressions. Per fold, the complement rows then provide (a) a
    regression of tau_x onto the modifier set and (b) a conditional density
    of ``modifier`` given the other modifiers; each is evaluated on the
    held-out fold. The marginal density of the modifier integrates the
    conditional over the complement rows, keeping every plug-in out of fold.
    """
    j = spec.index(modifier)
    if spec.kinds[j] != "continuous":
        raise ParameterError(f"partial dependence needs a continuous modifier, {modifier!r} is binary")
    if effect_spec is None:
        # the effect surface may carry interactions the modifiers alone
        # cannot express additively, so default to a tree-carrying stack
        effect_spec = LearnerSpec(kind="stack", members=(
            LearnerSpec(kind="linear_ridge"),
            LearnerSpec(kind="regression_tree"),
        ))
    V = modifier_matrix(data, spec)
    if V.shape[1] < 2:
        raise ParameterError("partial dependence needs at least two modifiers")
    phi = pseudo_cate(data, nuis)
    fa = nuis.assignment

    n = data.n
    # the covariate-level effect is the plug-in contrast of the outcome
    # regressions; tau_v projects it onto the modifiers
    tau_x = nuis.mu1 - nuis.mu0
    tau_v = np.empty(n)
    cond = np.empty(n)
    marg = np.empty(n)
    tau_models = []
    densities = []
    for k in range(fa.folds):
        test = fa.test_mask(k)
        train = ~test
        fit_v = fit(effect_spec, V[train], tau_x[train], seed=seed)
        density = fit_conditional_density(V[train], j, family=density_family)
        tau_v[test] = fit_v.predict(V[test])
        cond[test] = density.conditional(V[test, j], V[test])
        # marginal of the modifier: average the conditional over the
        # complement rows' backgrounds
        marg[test] = _marginal_density(density, V[test, j], V[train])
        tau_models.append(fit_v)
        densities.append(density)

    return PdNuisance(
        j=j, modifiers=V, phi=phi, tau_x=tau_x, tau_v=tau_v,
        cond_density=cond, marg_density=marg, fold_of=fa.fold_of,
        tau_models=tuple(tau_models), densities=tuple(densities),
    )


def tauv_on_rows(pdn: PdNuisance, v_values) -> np.ndarray:
    """Effect-surface matrix: entry (i, g) is tau_v(v_values[g], others_i).

    Row i uses the regression trained on the complement of row i's fold.
    """
    v_values = np.atleast_1d(np.asarray(v_values, dtype=np.float64))
    n = pdn.modifiers.shape[0]
    out = np.empty((n, v_values.shape[0]))
    for k, model in enumerate(pdn.tau_models):
        rows = np.flatnonzero(pdn.fold_of == k)
        block = np.repeat(pdn.modifiers[rows], v_values.shape[0], axis=0)
        block[:, pdn.j] = np.tile(v_values, rows.shape[0])
        out[rows] = model.predict(block).reshape(rows.shape[0], v_values.shape[0])
    return out


def theta_plugin(pdn: PdNuisance, v_values) -> np.ndarray:
    """Plug-in partial-dependence curve: row average of the effect surface."""
    v_values = np.atleast_1d(np.asarray(v_values, dtype=np.float64))
    out = np.empty(v_values.shape[0])
    # chunk the evaluation points so the (n, chunk) surface stays bounded
    chunk = max(1, int(2_000_000 // max(pdn.modifiers.shape[0], 1)))
    for s in range(0, v_values.shape[0], chunk):
        out[s : s + chunk] = tauv_on_rows(pdn, v_values[s : s + chunk]).mean(axis=0)
    return out


def pseudo_pd(data: Dataset, nuis: NuisanceEstimates, pdn: PdNuisance) -> np.ndarray:
    """Partial-dependence pseudo-outcomes for regression on the modifier.

    phi_pd = [ipw residual + tau_x - tau_v] * f_j(v) / f_j(v | others)
             + theta_plugin(v),

    with the ratio denominator floored at ``RATIO_FLOOR`` times the marginal
    density (a warning is emitted when more than 5% of rows hit the floor).
    """
    if pdn.modifiers.shape[0] != data.n:
        raise ValidationError("pd nuisance does not match the dataset")
    A, Y = data.treatment, data.outcome
    pi, mu0, mu1 = nuis.propensity, nuis.mu0, nuis.mu1
    mu_a = np.where(A == 1.0, mu1, mu0)
    resid = (A - pi) * (Y - mu_a) / (pi * (1.0 - pi))

    floor = RATIO_FLOOR * pdn.marg_density
    denom = np.maximum(pdn.cond_density, floor)
    n_floored = int((pdn.cond_density < floor).sum())
    if n_floored > _FLOOR_WARN_FRAC * data.n:
        warnings.warn(
            f"density ratio floored on {n_floored}/{data.n} rows; the "
            "modifier is nearly determined by the others and the "
            "partial-dependence reweighting is unreliable",
            DegenerateDensityWarning,
            stacklevel=2,
        )
    ratio = pdn.marg_density / denom
    return (resid + pdn.tau_x - pdn.tau_v) * ratio + theta_plugin(pdn, pdn.vj)


def pd_curve(data: Dataset, spec: ModifierSpec, modifier: str, nuis: NuisanceEstimates,
             grid=None, h: float | None = None, b: float | None = None,
             kernel: str = "uniform", mode: str = "debiased", alpha: float = 0.05,
             draws: int = DEFAULT_DRAWS, seed: int = 0,
             effect_spec: LearnerSpec | None = None,
             density_family: str = "kde",
             pdn: PdNuisance | None = None) -> tuple[CurveEstimate, PdNuisance]:
    """Partial-dependence effect curve with pointwise and uniform bands.

    Smooths the partial-dependence pseudo-outcomes along the modifier with a
    (debiased) local polynomial; the band accounts for the extra variance of
    averaging the effect surface over the other modifiers. Returns the curve
    and the cross-fitted nuisance bundle (reusable across grids).
    """
    if pdn is None:
        pdn = build_pd_nuisance(data, spec, modifier, nuis, effect_spec=effect_spec,
                                density_family=density_family, seed=seed)
    phi_pd = pseudo_pd(data, nuis, pdn)
    v = pdn.vj
    if grid is None:
        grid = localpoly.default_grid(v)
    grid = np.asarray(grid, dtype=np.float64)
    if h is None:
        h = localpoly.loocv_bandwidth(v, phi_pd, degree=1, kernel=kernel).h
    if b is None:
        b = float(h)
    res = localpoly.curve(v, phi_pd, grid=grid, h=h, b=b, kernel=kernel, mode=mode, weights=False)
    if not res.ok.any():
        raise NumericError(
            "partial-dependence curve could not be estimated at any grid point: "
            + "; ".join(res.diagnostics)
        )
    # points without a valid local fit (e.g. a grid node outside the data
    # support) are dropped and reported instead of aborting the curve
    grid = grid[res.ok]
    estimate = res.estimate[res.ok]
    surface = tauv_on_rows(pdn, grid)
    eif = eif_pd(v, phi_pd, grid, h=h, b=b, kernel=kernel, mode=mode,
                 tauv_on_rows=surface, cell_weights=grid_cell_weights(v, grid))
    band = uniform_band(eif, estimate, alpha=alpha, draws=draws, seed=seed)
    if res.diagnostics:
        band = dataclasses.replace(band, diagnostics=res.diagnostics)
    return band, pdn
