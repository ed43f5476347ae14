"""Local polynomial regression of pseudo-outcomes on a univariate modifier.

Fits are weighted least squares in the rescaled basis u = (v - v0) / h with
kernel weights K(u) / h. The plain local-linear value at v0 is the fitted
intercept; the debiased value subtracts an explicit smoothing-bias estimate
0.5 * h^2 * c2 * t2, where t2 is the curvature from a local cubic fit at a
(possibly different) bandwidth b and c2 is the kernel's second moment.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _backend
from ._backend import KERNEL_AT_ZERO, KERNEL_C2, KERNEL_IDS
from ._polycore import _kernel_values, moment_sums as _dense_moment_sums
from .errors import (
    InsufficientSupportError,
    NumericError,
    ParameterError,
    SingularityError,
    ValidationError,
)

__all__ = [
    "KERNELS",
    "LocalFit",
    "GammaWeights",
    "BandwidthResult",
    "CurveResult",
    "kernel_c2",
    "default_grid",
    "local_poly_fit",
    "second_derivative",
    "debiased_estimate",
    "loocv_bandwidth",
    "curve",
]

KERNELS = ("uniform", "epanechnikov", "gaussian")

#: default number of LOOCV bandwidth candidates
LOOCV_GRID_SIZE = 20

#: relative eigenvalue threshold below which a local design is declared singular
_SINGULAR_RTOL = 1e-12


def kernel_c2(kernel: str) -> float:
    """Second moment of the kernel, c2 = int u^2 K(u) du."""
    _check_kernel(kernel)
    return KERNEL_C2[kernel]


def _check_kernel(kernel: str) -> None:
    if kernel not in KERNEL_IDS:
        raise ParameterError(f"unknown kernel {kernel!r}; choose from {KERNELS}")


def _check_vphi(v, phi):
    v = np.asarray(v, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if v.ndim != 1 or phi.ndim != 1 or v.shape[0] != phi.shape[0]:
        raise ValidationError("v and phi must be 1-d arrays of equal length")
    if not (np.isfinite(v).all() and np.isfinite(phi).all()):
        raise ValidationError("v and phi must be finite")
    return v, phi


@dataclass(frozen=True)
class LocalFit:
    """A single weighted polynomial fit at one evaluation point.

    ``beta`` holds the coefficients in the rescaled basis u = (v - v0) / h,
    so ``beta[0]`` is the fitted curve value and ``beta[k] * k! / h**k`` the
    k-th derivative estimate. ``moments`` is the (degree+1)^2 design moment
    matrix D-hat = P_n[g g' K_h].
    """

    v0: float
    h: float
    degree: int
    kernel: str
    beta: np.ndarray
    moments: np.ndarray
    n_used: int

    @property
    def estimate(self) -> float:
        return float(self.beta[0])


@dataclass(frozen=True)
class GammaWeights:
    """Per-observation weights of a (possibly debiased) local-linear value.

    The represented functional is P_n[(ll - correction) * phi]: ``ll`` are the
    local-linear weights at bandwidth h and ``correction`` the curvature
    weights at bandwidth b scaled by c2 * h^2 / b^2 (zero for plain fits).
    """

    v0: float
    h: float
    b: float
    c2: float
    ll: np.ndarray
    correction: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.ll - self.correction


@dataclass(frozen=True)
class BandwidthResult:
    """Outcome of leave-one-out bandwidth selection."""

    h: float
    grid: np.ndarray
    scores: np.ndarray
    degree: int
    kernel: str


@dataclass(frozen=True)
class CurveResult:
    """Curve estimates over a grid, with optional per-point weight rows."""

    grid: np.ndarray
    estimate: np.ndarray
    plain: np.ndarray
    mode: str
    h: float
    b: float
    kernel: str
    ok: np.ndarray
    diagnostics: tuple[str, ...] = ()
    gamma_ll: np.ndarray | None = field(default=None, repr=False)
    gamma_corr: np.ndarray | None = field(default=None, repr=False)
    proj_ll: np.ndarray | None = field(default=None, repr=False)
    proj_corr: np.ndarray | None = field(default=None, repr=False)

    def gamma_at(self, idx: int) -> GammaWeights:
        if self.gamma_ll is None:
            raise ParameterError("curve was computed without weights; pass weights=True")
        return GammaWeights(
            v0=float(self.grid[idx]),
            h=self.h,
            b=self.b,
            c2=KERNEL_C2[self.kernel],
            ll=self.gamma_ll[idx],
            correction=self.gamma_corr[idx],
        )


def default_grid(v, num: int = 50, trim: tuple[float, float] = (0.05, 0.95)) -> np.ndarray:
    """Equispaced evaluation grid between two quantiles of the modifier."""
    v = np.asarray(v, dtype=np.float64)
    lo, hi = np.quantile(v, trim)
    if not hi > lo:
        raise ValidationError("modifier has no spread between the trim quantiles")
    return np.linspace(lo, hi, num)


# ---------------------------------------------------------------------------
# moment-system plumbing
# ---------------------------------------------------------------------------


def _hankel_systems(S, R, n, degree):
    """(D, r) with D[g] the moment matrix and r[g] the response moments."""
    p = degree + 1
    idx = np.arange(p)
    D = S[:, idx[:, None] + idx[None, :]] / n
    r = R[:, :p] / n
    return D, r


def _solvable(D) -> np.ndarray:
    """Boolean mask of well-conditioned symmetric systems."""
    w = np.linalg.eigvalsh(D)
    lo, hi = w[:, 0], w[:, -1]
    return (lo > _SINGULAR_RTOL * np.maximum(hi, 1.0)) & np.isfinite(hi)


def _solve_systems(D, r, ok):
    """Solve D beta = r on the ok rows; NaN elsewhere."""
    beta = np.full_like(r, np.nan)
    if ok.any():
        beta[ok] = np.linalg.solve(D[ok], r[ok][..., None])[..., 0]
    return beta


def _grid_systems(v, phi, grid, h, degree, kernel):
    """Moment systems at arbitrary centers, preserving the order of ``v``."""
    S, R, cnt = _dense_moment_sums(v, phi, grid, h, degree, KERNEL_IDS[kernel])
    D, r = _hankel_systems(S, R, v.shape[0], degree)
    return D, r, cnt


# ---------------------------------------------------------------------------
# single-point operations
# ---------------------------------------------------------------------------


def local_poly_fit(v, phi, v0: float, h: float, degree: int = 1, kernel: str = "uniform") -> LocalFit:
    """Weighted polynomial fit of ``phi`` on ``v`` at the point ``v0``.

    Parameters
    ----------
    v, phi : array_like
        Modifier values and pseudo-outcomes.
    v0 : float
        Evaluation point.
    h : float
        Bandwidth (> 0).
    degree : int
        Polynomial order, 1 (local linear) or 3 (local cubic).
    kernel : str
        One of ``uniform``, ``epanechnikov``, ``gaussian``.

    Returns
    -------
    LocalFit
        Coefficients in the rescaled basis plus the design moment matrix.
    """
    v, phi = _check_vphi(v, phi)
    _check_kernel(kernel)
    if degree not in (1, 3):
        raise ParameterError(f"degree must be 1 or 3, got {degree}")
    if not h > 0:
        raise ParameterError(f"bandwidth must be positive, got {h}")
    D, r, cnt = _grid_systems(v, phi, np.array([float(v0)]), h, degree, kernel)
    n_used = int(cnt[0])
    if n_used < degree + 2:
        raise InsufficientSupportError(
            f"local fit at v0={v0:g} has {n_used} in-kernel points; needs >= {degree + 2}"
        )
    ok = _solvable(D)
    if not ok[0]:
        raise SingularityError(f"local design at v0={v0:g} is rank deficient")
    beta = np.linalg.solve(D[0], r[0])
    return LocalFit(
        v0=float(v0), h=float(h), degree=degree, kernel=kernel,
        beta=beta, moments=D[0], n_used=n_used,
    )


def second_derivative(v, phi, v0: float, b: float, kernel: str = "uniform") -> float:
    """Curvature estimate 2 * b^-2 * (quadratic coefficient of a local cubic fit)."""
    fit = local_poly_fit(v, phi, v0, b, degree=3, kernel=kernel)
    return 2.0 * float(fit.beta[2]) / (b * b)


def debiased_estimate(v, phi, v0: float, h: float, b: float | None = None,
                      kernel: str = "uniform") -> tuple[float, GammaWeights]:
    """Bias-corrected local-linear value at ``v0`` plus its weight rows.

    Equals the plain local-linear fit minus 0.5 * h^2 * c2 * t2 with t2 from
    :func:`second_derivative` at bandwidth ``b`` (default ``b = h``).
    """
    v, phi = _check_vphi(v, phi)
    if b is None:
        b = h
    res = curve(v, phi, grid=np.array([float(v0)]), h=h, b=b, kernel=kernel,
                mode="debiased", weights=True)
    if not res.ok[0]:
        raise SingularityError("; ".join(res.diagnostics) or f"no valid fit at v0={v0:g}")
    return float(res.estimate[0]), res.gamma_at(0)


# ---------------------------------------------------------------------------
# bandwidth selection
# ---------------------------------------------------------------------------


def _press_from_sums(S, R, cnt, n, h, degree, k0, ps):
    """PRESS score from per-observation moment sums; inf if any fit degenerates."""
    if (cnt < degree + 2).any():
        return np.inf
    if degree == 1:
        # closed-form 2x2 path (the selection default, worth keeping cheap)
        s0, s1, s2 = S[:, 0], S[:, 1], S[:, 2]
        det = s0 * s2 - s1 * s1
        tr = (s0 + s2) / n
        disc = np.sqrt(np.maximum(tr * tr - 4.0 * det / (n * n), 0.0))
        lam_min, lam_max = (tr - disc) / 2.0, (tr + disc) / 2.0
        if not (lam_min > _SINGULAR_RTOL * np.maximum(lam_max, 1.0)).all():
            return np.inf
        fitted = (s2 * R[:, 0] - s1 * R[:, 1]) / det
        hat = s2 * k0 / (det * h)
    else:
        D, r = _hankel_systems(S, R, n, degree)
        if not _solvable(D).all():
            return np.inf
        beta = np.linalg.solve(D, r[..., None])[..., 0]
        fitted = beta[:, 0]
        hat = np.linalg.inv(D)[:, 0, 0] * k0 / (n * h)
    keep = 1.0 - hat
    if (keep <= 1e-12).any():
        return np.inf
    resid = (ps - fitted) / keep
    return float(resid @ resid)


def _prefix_moment_sums(vs, ps, h, degree, kernel):
    """Windowed moment sums at every observation via prefix sums.

    Valid for compact polynomial kernels only. Centers the data internally so
    the binomial expansion of sum (v - c)^k stays well conditioned; for
    degree 1 the worst-case relative error is ~(spread/h)^2 * eps, which is
    harmless for bandwidth scoring. ``cnt`` counts window membership
    (|v - c| <= h), which for the epanechnikov kernel may include
    boundary points of weight zero.
    """
    n = vs.shape[0]
    shift = vs.mean()
    vc = vs - shift
    kmax = 2 * degree + (2 if kernel == "epanechnikov" else 0)
    lo = np.searchsorted(vs, vs - h, side="left")
    hi = np.searchsorted(vs, vs + h, side="right")
    cnt = (hi - lo).astype(np.int64)

    pows = np.ones((kmax + 1, n))
    for k in range(1, kmax + 1):
        pows[k] = pows[k - 1] * vc
    zeros = np.zeros((kmax + 1, 1))
    PV = np.concatenate([zeros, np.cumsum(pows, axis=1)], axis=1)
    PR = np.concatenate([zeros, np.cumsum(pows * ps, axis=1)], axis=1)
    WV = PV[:, hi] - PV[:, lo]   # (kmax+1, n): window sums of v^j
    WR = PR[:, hi] - PR[:, lo]   # window sums of v^j * phi

    # binomial expansion: M_k(c) = sum_j C(k,j) (-c)^(k-j) * window_sum(v^j)
    neg_c_pow = np.ones((kmax + 1, n))
    for k in range(1, kmax + 1):
        neg_c_pow[k] = neg_c_pow[k - 1] * (-vc)
    binom = np.zeros((kmax + 1, kmax + 1))
    for k in range(kmax + 1):
        binom[k, 0] = 1.0
        for j in range(1, k + 1):
            binom[k, j] = binom[k - 1, j - 1] + binom[k - 1, j]
    MV = np.zeros((kmax + 1, n))
    MR = np.zeros((kmax + 1, n))
    for k in range(kmax + 1):
        for j in range(k + 1):
            coef = binom[k, j]
            MV[k] += coef * neg_c_pow[k - j] * WV[j]
            MR[k] += coef * neg_c_pow[k - j] * WR[j]

    n_s = 2 * degree + 1
    S = np.empty((n, n_s))
    R = np.empty((n, degree + 1))
    hk = h ** np.arange(kmax + 2)
    if kernel == "uniform":
        for k in range(n_s):
            S[:, k] = 0.5 * MV[k] / hk[k + 1]
            if k <= degree:
                R[:, k] = 0.5 * MR[k] / hk[k + 1]
    else:  # epanechnikov: K(u) u^k = 0.75 (u^k - u^(k+2))
        for k in range(n_s):
            S[:, k] = 0.75 * (MV[k] / hk[k + 1] - MV[k + 2] / hk[k + 3])
            if k <= degree:
                R[:, k] = 0.75 * (MR[k] / hk[k + 1] - MR[k + 2] / hk[k + 3])
    return S, R, cnt


def loocv_bandwidth(v, phi, degree: int = 1, kernel: str = "uniform",
                    grid=None) -> BandwidthResult:
    """Leave-one-out bandwidth selection for the local polynomial smoother.

    The LOO residual at each observation is obtained from the full-sample fit
    through the linear-smoother identity resid / (1 - H_ii), with hat diagonal
    H_ii = [D-hat^-1]_00 * K(0) / (n h). Candidates where any local design is
    singular (or a hat diagonal reaches one) are discarded; exact ties prefer
    the larger bandwidth.

    For degree-1 fits with a compact polynomial kernel the per-candidate cost
    is O(n log n): window moment sums come from prefix sums instead of direct
    accumulation (see :func:`_prefix_moment_sums`). Other configurations use
    the backend moment kernels directly.
    """
    v, phi = _check_vphi(v, phi)
    _check_kernel(kernel)
    if degree not in (1, 3):
        raise ParameterError(f"degree must be 1 or 3, got {degree}")
    n = v.shape[0]
    if n < degree + 2:
        raise ValidationError(f"need at least {degree + 2} observations")
    order = np.argsort(v, kind="stable")
    vs, ps = v[order], phi[order]
    if grid is None:
        spread = float(vs[-1] - vs[0])
        if spread <= 0:
            raise ValidationError("modifier values are all identical")
        grid = np.geomspace(spread / 50.0, spread, LOOCV_GRID_SIZE)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0 or not (grid > 0).all():
        raise ParameterError("bandwidth grid must be a 1-d array of positive values")

    k0 = KERNEL_AT_ZERO[kernel]
    fast = degree == 1 and kernel in ("uniform", "epanechnikov")
    scores = np.full(grid.shape, np.inf)
    for j, h in enumerate(grid):
        if fast:
            S, R, cnt = _prefix_moment_sums(vs, ps, float(h), degree, kernel)
        else:
            S, R, cnt = _backend.moment_sums(vs, ps, vs, float(h), degree, kernel)
        scores[j] = _press_from_sums(S, R, cnt, n, float(h), degree, k0, ps)

    # scan from the largest candidate down; only a materially better score
    # (beyond fp noise) displaces the incumbent, so near-ties keep the
    # larger, smoother bandwidth
    best_idx = -1
    for j in np.argsort(-grid, kind="stable"):
        better = best_idx < 0 or scores[j] < scores[best_idx] * (1.0 - 1e-10)
        if np.isfinite(scores[j]) and better:
            best_idx = j
    if best_idx < 0:
        raise NumericError("every candidate bandwidth produced singular local fits")
    return BandwidthResult(h=float(grid[best_idx]), grid=grid, scores=scores,
                           degree=degree, kernel=kernel)


# ---------------------------------------------------------------------------
# curves over a grid
# ---------------------------------------------------------------------------


def _polyval_rows(coef, U):
    """Row-wise Horner evaluation: out[g, i] = sum_k coef[g, k] U[g, i]^k."""
    out = np.zeros_like(U)
    for k in range(coef.shape[1] - 1, -1, -1):
        out *= U
        out += coef[:, k, None]
    return out


def curve(v, phi, grid=None, h: float | None = None, b: float | None = None,
          kernel: str = "uniform", mode: str = "debiased",
          weights: bool = True) -> CurveResult:
    """Local-polynomial curve estimate over a grid.

    Parameters
    ----------
    v, phi : array_like
        Modifier values and pseudo-outcomes (any order; rows are preserved).
    grid : array_like, optional
        Evaluation points; defaults to 50 points between the 5% and 95%
        quantiles of ``v``.
    h, b : float, optional
        Local-linear and curvature bandwidths. ``h`` defaults to leave-one-out
        selection on the plain fit; ``b`` defaults to ``h``.
    kernel : str
        Kernel name.
    mode : str
        ``"plain"`` (local linear) or ``"debiased"`` (bias corrected).
    weights : bool
        Also return per-grid-point weight rows and local projections, needed
        for influence-function work downstream.

    Notes
    -----
    Grid points whose local design has too little support or is singular are
    skipped: their estimates are NaN, ``ok`` is False, and a diagnostic string
    is recorded.
    """
    v, phi = _check_vphi(v, phi)
    _check_kernel(kernel)
    if mode not in ("plain", "debiased"):
        raise ParameterError(f"mode must be 'plain' or 'debiased', got {mode!r}")
    if grid is None:
        grid = default_grid(v)
    grid = np.asarray(grid, dtype=np.float64)
    if h is None:
        h = loocv_bandwidth(v, phi, degree=1, kernel=kernel).h
    if b is None:
        b = float(h)
    if not (h > 0 and b > 0):
        raise ParameterError("bandwidths must be positive")
    n = v.shape[0]
    m = grid.shape[0]
    c2 = KERNEL_C2[kernel]
    kid = KERNEL_IDS[kernel]
    diagnostics: list[str] = []

    D1, r1, cnt1 = _grid_systems(v, phi, grid, h, 1, kernel)
    ok = cnt1 >= 3
    for g in np.flatnonzero(~ok):
        diagnostics.append(f"grid[{g}]={grid[g]:g}: {cnt1[g]} in-kernel points at h, needs >= 3")
    solv = _solvable(D1)
    for g in np.flatnonzero(ok & ~solv):
        diagnostics.append(f"grid[{g}]={grid[g]:g}: singular local-linear design")
    ok &= solv
    beta1 = _solve_systems(D1, r1, ok)
    plain = beta1[:, 0].copy()

    beta3 = None
    if mode == "debiased":
        D3, r3, cnt3 = _grid_systems(v, phi, grid, b, 3, kernel)
        ok3 = cnt3 >= 5
        for g in np.flatnonzero(ok & ~ok3):
            diagnostics.append(f"grid[{g}]={grid[g]:g}: {cnt3[g]} in-kernel points at b, needs >= 5")
        solv3 = _solvable(D3)
        for g in np.flatnonzero(ok & ok3 & ~solv3):
            diagnostics.append(f"grid[{g}]={grid[g]:g}: singular local-cubic design")
        ok &= ok3 & solv3
        beta3 = _solve_systems(D3, r3, ok)
        estimate = plain - (h * h) * c2 / (b * b) * beta3[:, 2]
    else:
        estimate = plain.copy()
    estimate[~ok] = np.nan
    plain[~ok] = np.nan

    gamma_ll = gamma_corr = proj_ll = proj_corr = None
    if weights:
        U1 = (v[None, :] - grid[:, None]) / h
        W1 = _kernel_values(kid, U1) / h
        A1 = np.full((m, 2, 2), np.nan)
        if ok.any():
            A1[ok] = np.linalg.inv(D1[ok])
        gamma_ll = (A1[:, 0, 0, None] + A1[:, 0, 1, None] * U1) * W1
        proj_ll = _polyval_rows(beta1, U1)
        if mode == "debiased":
            U3 = (v[None, :] - grid[:, None]) / b
            W3 = _kernel_values(kid, U3) / b
            A3 = np.full((m, 4, 4), np.nan)
            if ok.any():
                A3[ok] = np.linalg.inv(D3[ok])
            scale = c2 * h * h / (b * b)
            gamma_corr = scale * _polyval_rows(A3[:, 2, :], U3) * W3
            proj_corr = _polyval_rows(beta3, U3)
        else:
            gamma_corr = np.zeros_like(gamma_ll)
            proj_corr = np.zeros_like(proj_ll)

    return CurveResult(
        grid=grid, estimate=estimate, plain=plain, mode=mode, h=float(h), b=float(b),
        kernel=kernel, ok=ok, diagnostics=tuple(diagnostics),
        gamma_ll=gamma_ll, gamma_corr=gamma_corr, proj_ll=proj_ll, proj_corr=proj_corr,
    )
