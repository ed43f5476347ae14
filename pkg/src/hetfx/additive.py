"""Additive (sum of univariate functions) modeling of pseudo-outcomes.

Each continuous effect modifier gets a cubic B-spline expansion with knots at
equispaced quantiles; binary modifiers enter as plain indicators. A shared
basis size is chosen by leave-one-out cross-validation, components are
centered to average zero over the data, and multiplier-bootstrap bands
account for heteroscedastic errors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline
from scipy.stats import norm

from .bands import DEFAULT_DRAWS, MIN_DRAWS, CurveEstimate, max_abs_quantile
from .errors import FitError, ParameterError, ValidationError
from .localpoly import default_grid

__all__ = [
    "M_GRID",
    "ModifierBasis",
    "AdditiveFit",
    "fit_additive",
    "component_band",
]

#: candidate shared basis sizes for the spline expansions
M_GRID = (4, 6, 8, 12)

_SPLINE_DEGREE = 3
_SINGULAR_RTOL = 1e-12


def _infer_kinds(V: np.ndarray) -> tuple[str, ...]:
    kinds = []
    for j in range(V.shape[1]):
        vals = np.unique(V[:, j])
        kinds.append("binary" if vals.size <= 2 and np.isin(vals, (0.0, 1.0)).all() else "continuous")
    return tuple(kinds)


def _spline_knots(x: np.ndarray, m: int) -> np.ndarray | None:
    """Knot vector giving ``m`` cubic B-spline basis functions on x's range.

    Interior knots sit at equispaced quantiles. Returns None when ties in x
    collapse the knots, which disqualifies this basis size.
    """
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        return None
    q = m - (_SPLINE_DEGREE + 1)
    interior = np.quantile(x, np.arange(1, q + 1) / (q + 1)) if q > 0 else np.empty(0)
    full = np.concatenate([np.repeat(lo, _SPLINE_DEGREE + 1), interior,
                           np.repeat(hi, _SPLINE_DEGREE + 1)])
    if not (np.diff(np.concatenate([[lo], interior, [hi]])) > 0).all():
        return None
    return full


def _spline_design(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Dense cubic B-spline design; x is clipped into the training range."""
    lo, hi = knots[_SPLINE_DEGREE], knots[-_SPLINE_DEGREE - 1]
    xc = np.clip(np.asarray(x, dtype=np.float64), lo, hi)
    return BSpline.design_matrix(xc, knots, _SPLINE_DEGREE).toarray()


@dataclass(frozen=True)
class ModifierBasis:
    """Design-matrix block for one effect modifier.

    Continuous modifiers expand into a cubic B-spline basis with the first
    basis function dropped (its role is absorbed by the model intercept);
    binary modifiers contribute their raw indicator column.
    """

    index: int
    kind: str
    knots: np.ndarray | None
    start: int
    stop: int

    def design(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self.kind == "binary":
            return v[:, None]
        return _spline_design(v, self.knots)[:, 1:]


def _build_design(V, kinds, m):
    """Full design [1 | block_1 | ... | block_d]; None when m is infeasible."""
    n = V.shape[0]
    cols = [np.ones((n, 1))]
    bases = []
    start = 1
    for j, kind in enumerate(kinds):
        if kind == "binary":
            basis = ModifierBasis(index=j, kind="binary", knots=None, start=start, stop=start + 1)
        else:
            knots = _spline_knots(V[:, j], m)
            if knots is None:
                return None, None
            basis = ModifierBasis(index=j, kind="continuous", knots=knots,
                                  start=start, stop=start + m - 1)
        cols.append(basis.design(V[:, j]))
        bases.append(basis)
        start = basis.stop
    return np.hstack(cols), tuple(bases)


def _gram_inverse(X: np.ndarray) -> np.ndarray | None:
    G = X.T @ X
    lam = np.linalg.eigvalsh(G)
    if lam[0] <= _SINGULAR_RTOL * max(lam[-1], 1.0):
        return None
    return np.linalg.inv(G)


def _press(X, y, Ginv) -> float:
    beta = Ginv @ (X.T @ y)
    resid = y - X @ beta
    hat = np.einsum("ij,jk,ik->i", X, Ginv, X)
    one_minus = 1.0 - hat
    if (one_minus <= 1e-8).any():
        return float("inf")
    return float(np.mean((resid / one_minus) ** 2))


@dataclass(frozen=True)
class AdditiveFit:
    """Fitted additive model phi ~ intercept + sum_j h_j(V_j).

    ``component(j, v)`` evaluates the j-th centered component (mean zero over
    the training data); ``profile(j, v)`` adds back the average response
    level, giving the effect profile along modifier j with the remaining
    components held at their average contribution.
    """

    bases: tuple[ModifierBasis, ...]
    coef: np.ndarray
    gram_inv: np.ndarray
    design: np.ndarray
    residuals: np.ndarray
    modifiers: np.ndarray
    comp_means: np.ndarray
    intercept: float
    level: float
    m: int
    loocv_scores: dict
    n: int

    def component(self, j: int, v, centered: bool = True) -> np.ndarray:
        if not 0 <= j < len(self.bases):
            raise ParameterError(f"modifier index {j} out of range")
        basis = self.bases[j]
        vals = basis.design(np.atleast_1d(np.asarray(v, dtype=np.float64))) @ self.coef[basis.start:basis.stop]
        return vals - self.comp_means[j] if centered else vals

    def profile(self, j: int, v) -> np.ndarray:
        """Average response level plus the j-th centered component."""
        return self.level + self.component(j, v)

    def predict(self, V) -> np.ndarray:
        V = np.asarray(V, dtype=np.float64)
        if V.ndim == 1:
            V = V[:, None]
        if V.shape[1] != len(self.bases):
            raise ValidationError(f"expected {len(self.bases)} modifier columns, got {V.shape[1]}")
        out = np.full(V.shape[0], self.level)
        for j in range(len(self.bases)):
            out += self.component(j, V[:, j])
        return out


def fit_additive(modifiers, phi, kinds: tuple[str, ...] | None = None,
                 m_grid: tuple[int, ...] = M_GRID) -> AdditiveFit:
    """Fit an additive model of ``phi`` on the modifier columns by least squares.

    Parameters
    ----------
    modifiers : array_like, shape (n, d)
    phi : array_like, shape (n,)
    kinds : tuple of str, optional
        "continuous" or "binary" per column; inferred from the values when
        omitted (binary iff the column only takes values in {0, 1}).
    m_grid : tuple of int
        Candidate spline basis sizes (shared by all continuous modifiers),
        scored by exact leave-one-out cross-validation; ties prefer the
        smaller size.

    Raises
    ------
    FitError
        If every candidate design is singular (e.g. duplicated columns).
    """
    V = np.asarray(modifiers, dtype=np.float64)
    if V.ndim == 1:
        V = V[:, None]
    phi = np.asarray(phi, dtype=np.float64).ravel()
    if V.ndim != 2 or V.shape[0] != phi.shape[0]:
        raise ValidationError("modifiers must be (n, d) with phi of length n")
    if not (np.isfinite(V).all() and np.isfinite(phi).all()):
        raise ValidationError("modifiers and phi must be finite")
    if V.shape[1] == 0:
        raise ValidationError("need at least one modifier column")
    if any(m < _SPLINE_DEGREE + 1 for m in m_grid):
        raise ParameterError(f"spline basis sizes must be >= {_SPLINE_DEGREE + 1}")
    kinds = _infer_kinds(V) if kinds is None else tuple(kinds)
    if len(kinds) != V.shape[1]:
        raise ValidationError("kinds must match the number of modifier columns")
    if any(k not in ("continuous", "binary") for k in kinds):
        raise ParameterError("modifier kinds must be 'continuous' or 'binary'")

    candidates = tuple(sorted(set(m_grid))) if "continuous" in kinds else (min(m_grid),)
    scores = {}
    best_m = None
    for m in candidates:
        X, bases = _build_design(V, kinds, m)
        score = float("inf")
        if X is not None and X.shape[1] < X.shape[0]:
            Ginv = _gram_inverse(X)
            if Ginv is not None:
                score = _press(X, phi, Ginv)
        scores[m] = score
        if np.isfinite(score) and (best_m is None or score < scores[best_m] * (1.0 - 1e-10)):
            best_m = m
    if best_m is None:
        raise FitError("all additive designs are singular or infeasible")

    X, bases = _build_design(V, kinds, best_m)
    Ginv = _gram_inverse(X)
    coef = Ginv @ (X.T @ phi)
    fitted = X @ coef
    comp_means = np.array([X[:, b.start:b.stop] @ coef[b.start:b.stop] for b in bases]).mean(axis=1)
    intercept = float(coef[0])
    return AdditiveFit(
        bases=bases, coef=coef, gram_inv=Ginv, design=X, residuals=phi - fitted,
        modifiers=V, comp_means=comp_means, intercept=intercept,
        level=intercept + float(comp_means.sum()), m=best_m,
        loocv_scores=scores, n=V.shape[0],
    )


def component_band(fit: AdditiveFit, j: int, grid=None, alpha: float = 0.05,
                   draws: int = DEFAULT_DRAWS, seed: int = 0) -> CurveEstimate:
    """Multiplier-bootstrap confidence band for the j-th centered component.

    Each draw perturbs the least-squares residuals with independent standard
    normal multipliers, propagates the perturbation through the closed-form
    coefficient map, and records the resulting component shift on the grid;
    the uniform critical value is the (1 - alpha) quantile of the sup of the
    standardized shifts. Pointwise scales come from the exact
    heteroscedasticity-robust sandwich, so no simulation noise enters them.
    """
    if draws < MIN_DRAWS:
        raise ParameterError(f"draws must be >= {MIN_DRAWS}")
    if not 0.0 < alpha:
        raise ParameterError("alpha must be positive")
    if not 0 <= j < len(fit.bases):
        raise ParameterError(f"modifier index {j} out of range")
    basis = fit.bases[j]
    if grid is None:
        grid = np.array([0.0, 1.0]) if basis.kind == "binary" else default_grid(fit.modifiers[:, j])
    grid = np.asarray(grid, dtype=np.float64)

    estimate = fit.component(j, grid)
    B_grid = basis.design(grid)
    centered = B_grid - fit.design[:, basis.start:basis.stop].mean(axis=0)[None, :]
    # T maps residual perturbations to component shifts on the grid
    T = centered @ fit.gram_inv[basis.start:basis.stop, :] @ (fit.design * fit.residuals[:, None]).T
    sigma = np.sqrt((T * T).sum(axis=1))
    if not (sigma > 0).all():
        raise FitError("degenerate component: zero variance on the band grid")

    if alpha >= 1.0:
        z = crit = 0.0
    else:
        z = float(norm.ppf(1.0 - alpha / 2.0))
        rng = np.random.Generator(np.random.Philox(seed))
        xi = rng.standard_normal((fit.n, draws))
        Z = (T @ xi).T / sigma[None, :]
        crit = max(max_abs_quantile(Z, alpha), z)

    return CurveEstimate(
        grid=grid, estimate=estimate,
        pointwise_lo=estimate - z * sigma, pointwise_hi=estimate + z * sigma,
        uniform_lo=estimate - crit * sigma, uniform_hi=estimate + crit * sigma,
        sigma=sigma, alpha=float(alpha), crit_pointwise=z, crit_uniform=float(crit),
        draws=draws, n=fit.n, kind="additive", target="component", h=None, b=None,
    )
