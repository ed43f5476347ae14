"""Influence-function values and confidence bands for effect curves.

The estimated curves are linear functionals P_n[Gamma_v0 * phi] of the
pseudo-outcomes. Centered per-observation influence values drive both the
pointwise standard errors and a multiplier-free uniform band: the band's
critical value is the (1-alpha) quantile of the sup over the grid of a
mean-zero Gaussian vector with the influence values' correlation matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import localpoly
from .errors import NumericError, ParameterError, ValidationError
from .localpoly import _grid_systems, _polyval_rows, _solve_systems

__all__ = [
    "CurveEstimate",
    "EifValues",
    "CoverageResult",
    "eif_cate",
    "eif_pd",
    "uniform_band",
    "effect_curve",
    "max_abs_quantile",
    "gaussian_coverage_check",
]

#: minimum number of Gaussian draws accepted for a uniform band
MIN_DRAWS = 500

#: floor applied to correlation-matrix eigenvalues before factorization
EIGEN_FLOOR = 1e-10

DEFAULT_DRAWS = 2000


@dataclass(frozen=True)
class CurveEstimate:
    """A curve with pointwise and uniform (1 - alpha) confidence bands."""

    grid: np.ndarray
    estimate: np.ndarray
    pointwise_lo: np.ndarray
    pointwise_hi: np.ndarray
    uniform_lo: np.ndarray
    uniform_hi: np.ndarray
    sigma: np.ndarray
    alpha: float
    crit_pointwise: float
    crit_uniform: float
    draws: int
    n: int
    kind: str
    target: str
    h: float | None = None
    b: float | None = None
    diagnostics: tuple[str, ...] = ()

    def covers(self, truth) -> bool:
        """Whether the uniform band contains ``truth`` at every grid point."""
        truth = np.asarray(truth, dtype=np.float64)
        return bool((self.uniform_lo <= truth).all() and (truth <= self.uniform_hi).all())


@dataclass(frozen=True)
class EifValues:
    """Centered influence values, one row per observation, one column per grid point."""

    grid: np.ndarray
    values: np.ndarray
    h: float
    b: float
    kernel: str
    kind: str
    target: str


@dataclass(frozen=True)
class CoverageResult:
    coverage: float
    reps: int
    failures: int


def _projection_beta(v, target, grid, h, degree, kernel):
    """Local WLS coefficients of ``target`` at every grid point."""
    D, r, _ = _grid_systems(v, target, grid, h, degree, kernel)
    ok = localpoly._solvable(D)
    if not ok.all():
        raise NumericError("singular local design while projecting tau_hat")
    return _solve_systems(D, r, ok)


def eif_cate(v, phi, grid, h: float, b: float | None = None, kernel: str = "uniform",
             mode: str = "debiased", tau_hat=None) -> EifValues:
    """Influence values for the (plain or debiased) local-linear effect curve.

    At each grid point v0 the influence value of observation i is

        Gamma_v0(v_i) * phi_i - gamma_v0(v_i),

    where gamma projects the curve plug-in back onto the local polynomial
    spaces. By default the projections use the local fits to ``phi`` itself,
    which makes each column average exactly zero; supplying ``tau_hat``
    (curve values at the observations) switches to that explicit plug-in.
    """
    v = np.asarray(v, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if b is None:
        b = float(h)
    res = localpoly.curve(v, phi, grid=grid, h=h, b=b, kernel=kernel, mode=mode, weights=True)
    if not res.ok.all():
        raise NumericError(
            "influence values need a valid fit at every grid point: "
            + "; ".join(res.diagnostics)
        )
    proj_ll, proj_corr = res.proj_ll, res.proj_corr
    if tau_hat is not None:
        tau_hat = np.asarray(tau_hat, dtype=np.float64)
        if tau_hat.shape != v.shape:
            raise ValidationError("tau_hat must align with v")
        beta1 = _projection_beta(v, tau_hat, grid, h, 1, kernel)
        proj_ll = _polyval_rows(beta1, (v[None, :] - grid[:, None]) / h)
        if mode == "debiased":
            beta3 = _projection_beta(v, tau_hat, grid, b, 3, kernel)
            proj_corr = _polyval_rows(beta3, (v[None, :] - grid[:, None]) / b)
    values = res.gamma_ll * (phi[None, :] - proj_ll)
    if mode == "debiased":
        values = values - res.gamma_corr * (phi[None, :] - proj_corr)
    target = "debiased" if mode == "debiased" else "smoothed"
    return EifValues(grid=grid, values=values.T.copy(), h=float(h), b=float(b),
                     kernel=kernel, kind="cate", target=target)


def eif_pd(v, phi, grid, h: float, b: float | None = None, kernel: str = "uniform",
           mode: str = "debiased", tauv_on_rows=None, cell_weights=None) -> EifValues:
    """Influence values for a partial-dependence effect curve.

    On top of the conditional-effect terms, the partial-dependence estimand
    pays for not knowing the modifier's marginal distribution: for each
    observation the weighted-sum approximation of

        integral Gamma_v0(u) [tauv(u, rest_i) - theta(u)] dP(u)

    over the band grid is added, with ``tauv_on_rows[i, g]`` the second-stage
    effect surface evaluated at (grid[g], rest of row i) and ``cell_weights``
    the empirical mass of the modifier in the midpoint cells around the grid
    (computed from ``v`` when omitted). theta on the grid is the column mean
    of ``tauv_on_rows``, which keeps every column of the result mean zero.
    """
    v = np.asarray(v, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if tauv_on_rows is None:
        raise ParameterError("eif_pd requires tauv_on_rows (n x grid matrix)")
    tauv_on_rows = np.asarray(tauv_on_rows, dtype=np.float64)
    if tauv_on_rows.shape != (v.shape[0], grid.shape[0]):
        raise ValidationError("tauv_on_rows must have shape (n, len(grid))")
    base = eif_cate(v, phi, grid, h, b, kernel=kernel, mode=mode)
    if cell_weights is None:
        cell_weights = grid_cell_weights(v, grid)
    cell_weights = np.asarray(cell_weights, dtype=np.float64)

    # Gamma weight of curve point v0 evaluated at the grid nodes u: reuse the
    # weight rows computed on a synthetic sample located at the nodes.
    gamma_nodes = _gamma_matrix(v, phi, grid, base.h, base.b, kernel, mode)
    theta_grid = tauv_on_rows.mean(axis=0)
    centered = tauv_on_rows - theta_grid[None, :]          # (n, m_nodes)
    integral = centered @ (gamma_nodes * cell_weights[None, :]).T  # (n, m_v0)
    values = base.values + integral
    return EifValues(grid=grid, values=values, h=base.h, b=base.b,
                     kernel=kernel, kind="pd", target=base.target)


def _gamma_matrix(v, phi, grid, h, b, kernel, mode):
    """gamma[v0_idx, node_idx] = Gamma weight function of v0 at grid node.

    The moment systems come from the observations; only the evaluation points
    of the resulting weight function differ from the usual in-sample weights.
    """
    D1, _, _ = _grid_systems(v, phi, grid, h, 1, kernel)
    A1 = np.linalg.inv(D1)
    U1 = (grid[None, :] - grid[:, None]) / h
    W1 = localpoly._kernel_values(localpoly.KERNEL_IDS[kernel], U1) / h
    gamma = (A1[:, 0, 0, None] + A1[:, 0, 1, None] * U1) * W1
    if mode == "debiased":
        D3, _, _ = _grid_systems(v, phi, grid, b, 3, kernel)
        A3 = np.linalg.inv(D3)
        U3 = (grid[None, :] - grid[:, None]) / b
        W3 = localpoly._kernel_values(localpoly.KERNEL_IDS[kernel], U3) / b
        c2 = localpoly.KERNEL_C2[kernel]
        gamma = gamma - c2 * h * h / (b * b) * _polyval_rows(A3[:, 2, :], U3) * W3
    return gamma


def grid_cell_weights(v, grid) -> np.ndarray:
    """Empirical mass of ``v`` allocated to grid nodes by linear interpolation.

    Each observation splits its 1/n mass between the two bracketing nodes in
    proportion to proximity (trapezoid reweighting); observations outside the
    grid clamp to the nearest end node. The weights always sum to one.
    """
    v = np.asarray(v, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ParameterError("grid must be a non-empty 1-d array")
    if grid.size == 1:
        return np.ones(1)
    if not (np.diff(grid) > 0).all():
        raise ParameterError("grid must be strictly increasing")
    idx = np.clip(np.searchsorted(grid, v, side="right") - 1, 0, grid.size - 2)
    t = np.clip((v - grid[idx]) / (grid[idx + 1] - grid[idx]), 0.0, 1.0)
    w = np.zeros(grid.size)
    np.add.at(w, idx, 1.0 - t)
    np.add.at(w, idx + 1, t)
    return w / v.shape[0]


# ---------------------------------------------------------------------------
# uniform bands
# ---------------------------------------------------------------------------


def _correlation(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = values.shape[0]
    cov = values.T @ values / n
    d2 = np.diag(cov).copy()
    if not (d2 > 0).all():
        raise NumericError("influence values have zero variance at some grid point")
    d = np.sqrt(d2)
    corr = cov / np.outer(d, d)
    corr = (corr + corr.T) / 2.0
    return corr, d


def _standardized_gaussian_draws(corr: np.ndarray, draws: int, seed: int) -> np.ndarray:
    """Draws from N(0, corr) (eigenvalues floored), standardized per column."""
    lam, U = np.linalg.eigh(corr)
    lam = np.maximum(lam, EIGEN_FLOOR)
    A = U * np.sqrt(lam)[None, :]
    rng = np.random.Generator(np.random.Philox(seed))
    Z = rng.standard_normal((draws, corr.shape[0])) @ A.T
    col_sd = np.sqrt((A * A).sum(axis=1))
    return Z / col_sd[None, :]


def max_abs_quantile(Z: np.ndarray, alpha: float) -> float:
    """(1 - alpha) quantile of the row-wise sup-absolute value of ``Z``."""
    return float(np.quantile(np.abs(Z).max(axis=1), 1.0 - alpha))


def uniform_band(eif: EifValues, estimate, alpha: float = 0.05,
                 draws: int = DEFAULT_DRAWS, seed: int = 0) -> CurveEstimate:
    """Pointwise and uniform confidence bands around a curve estimate.

    Parameters
    ----------
    eif : EifValues
        Centered influence values from :func:`eif_cate` or :func:`eif_pd`.
    estimate : array_like
        Curve estimate at ``eif.grid``.
    alpha : float
        Miscoverage level; ``alpha >= 1`` degenerates to zero-width bands.
    draws : int
        Gaussian draws for the sup quantile (>= 500).
    seed : int
        Seed for the counter-based Gaussian draw stream.

    Notes
    -----
    The per-point scale is sigma(v0) = sqrt(h * P_n[eif^2]); both bands are
    estimate +- crit * sigma / sqrt(n h). The uniform critical value is the
    simulated (1 - alpha) quantile of the sup of |N(0, Corr)|, never below
    the pointwise normal quantile, so the uniform band always contains the
    pointwise band.
    """
    if draws < MIN_DRAWS:
        raise ParameterError(f"draws must be >= {MIN_DRAWS}")
    if not 0.0 < alpha:
        raise ParameterError("alpha must be positive")
    estimate = np.asarray(estimate, dtype=np.float64)
    if estimate.shape != eif.grid.shape:
        raise ValidationError("estimate must align with the band grid")
    if not np.isfinite(estimate).all():
        raise ValidationError("estimate contains non-finite values")
    values = eif.values
    n, m = values.shape
    sigma2 = eif.h * np.mean(values * values, axis=0)
    if not (sigma2 > 0).all():
        raise NumericError("influence values have zero variance at some grid point")
    sigma = np.sqrt(sigma2)
    se = sigma / np.sqrt(n * eif.h)

    if alpha >= 1.0:
        z = 0.0
        crit = 0.0
    else:
        z = float(norm.ppf(1.0 - alpha / 2.0))
        corr, _ = _correlation(values)
        Z = _standardized_gaussian_draws(corr, draws, seed)
        crit = max(max_abs_quantile(Z, alpha), z)

    return CurveEstimate(
        grid=eif.grid, estimate=estimate,
        pointwise_lo=estimate - z * se, pointwise_hi=estimate + z * se,
        uniform_lo=estimate - crit * se, uniform_hi=estimate + crit * se,
        sigma=sigma, alpha=float(alpha), crit_pointwise=z, crit_uniform=float(crit),
        draws=draws, n=n, kind=eif.kind, target=eif.target, h=eif.h, b=eif.b,
    )


def effect_curve(v, phi, grid=None, h: float | None = None, b: float | None = None,
                 kernel: str = "uniform", mode: str = "debiased", alpha: float = 0.05,
                 draws: int = DEFAULT_DRAWS, seed: int = 0) -> CurveEstimate:
    """Local-polynomial effect curve with bands, from pseudo-outcomes.

    Bandwidth ``h`` defaults to leave-one-out cross-validation and ``b``
    (the curvature bandwidth of the debiased fit) to ``h``; the grid defaults
    to 50 points between the 5th and 95th percentiles of ``v``.
    """
    v = np.asarray(v, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if grid is None:
        grid = localpoly.default_grid(v)
    grid = np.asarray(grid, dtype=np.float64)
    if h is None:
        h = localpoly.loocv_bandwidth(v, phi, degree=1, kernel=kernel).h
    if b is None:
        b = float(h)
    res = localpoly.curve(v, phi, grid=grid, h=h, b=b, kernel=kernel, mode=mode, weights=False)
    if not res.ok.all():
        raise NumericError(
            "curve could not be estimated at every grid point: " + "; ".join(res.diagnostics)
        )
    eif = eif_cate(v, phi, grid, h=h, b=b, kernel=kernel, mode=mode)
    return uniform_band(eif, res.estimate, alpha=alpha, draws=draws, seed=seed)


def gaussian_coverage_check(dgp, estimator: dict, reps: int = 100,
                            alpha: float = 0.05, seed: int = 0) -> CoverageResult:
    """Monte-Carlo uniform-band coverage of a known truth.

    Parameters
    ----------
    dgp : callable
        ``dgp(rng) -> (v, phi, truth)`` with ``truth`` a callable mapping grid
        values to the true curve.
    estimator : dict
        Keys (all optional): ``mode`` ("debiased"/"plain"), ``kernel``,
        ``grid`` (array; default = per-rep quantile grid), ``h`` (float or
        "loocv"), ``b``, ``draws``.
    reps, alpha, seed
        Replications, nominal miscoverage, master seed.

    Returns
    -------
    CoverageResult
        Fraction of successful reps whose uniform band covers the whole
        truth, plus the failure count (reps whose fit degenerated).
    """
    mode = estimator.get("mode", "debiased")
    kernel = estimator.get("kernel", "uniform")
    draws = estimator.get("draws", DEFAULT_DRAWS)
    covered = 0
    failures = 0
    for rep in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0F, rep]))
        v, phi, truth = dgp(rng)
        grid = estimator.get("grid")
        grid = localpoly.default_grid(v) if grid is None else np.asarray(grid, dtype=np.float64)
        try:
            h = estimator.get("h", "loocv")
            if h == "loocv":
                h = localpoly.loocv_bandwidth(v, phi, degree=1, kernel=kernel).h
            b = estimator.get("b") or h
            res = localpoly.curve(v, phi, grid=grid, h=h, b=b, kernel=kernel,
                                  mode=mode, weights=False)
            if not res.ok.all():
                failures += 1
                continue
            eif = eif_cate(v, phi, grid, h, b, kernel=kernel, mode=mode)
            band = uniform_band(eif, res.estimate, alpha=alpha, draws=draws,
                                seed=int(np.random.SeedSequence([seed, 0xBA2D, rep]).generate_state(1)[0]))
        except NumericError:
            failures += 1
            continue
        covered += band.covers(truth(grid))
    done = reps - failures
    return CoverageResult(coverage=covered / done if done else float("nan"), reps=reps, failures=failures)
