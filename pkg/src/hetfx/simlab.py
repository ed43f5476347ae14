"""Simulation benchmark with known effect curves.

A three-covariate synthetic model drives end-to-end checks of every
estimator in the package. ``W ~ N(0,1)`` is independent of ``(V1, V2)``,
a standard bivariate normal pair with correlation ``rho``; treatment
follows a logistic propensity in all three covariates and each arm's
outcome mean is linear, so every target has a closed form:

    tau_x(w, v1, v2) = 0.5 w + v1 + v2        (effect surface)
    tau_v(v1, v2)    = v1 + v2                (modifier projection)
    tau_1(v1)        = (1 + rho) v1           (univariate effect curve)
    theta_1(v1)      = v1                     (partial-dependence curve)
    ate              = 0

``run_scenario`` replays two designs -- growing sample size at fixed
correlation, and growing correlation at fixed sample size -- for five curve
estimators, each with fitted ("feasible") and known ("oracle") nuisances on
the same draws. Per replication it records density-weighted signed errors on
a fixed grid; the reported RMSE is the median per-replication weighted root
mean square, with a bootstrap Monte-Carlo standard error. ``ate_coverage``
and ``band_coverage`` run the matching interval/band calibration checks.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from . import localpoly
from .additive import fit_additive
from .bands import CoverageResult, gaussian_coverage_check, grid_cell_weights
from .crossfit import NuisanceEstimates, estimate_ate, fit_nuisances, pseudo_cate
from .dataset import Dataset, ModifierSpec
from .errors import DegenerateDensityWarning, NumericError, ParameterError
from .learners import LearnerSpec
from .pdcurve import PdNuisance, build_pd_nuisance, pseudo_pd

__all__ = [
    "ARMS",
    "METHODS",
    "SCENARIO_N",
    "SCENARIO_RHO",
    "TRIM",
    "DgpConfig",
    "ScenarioRow",
    "ScenarioResult",
    "ate_coverage",
    "band_coverage",
    "generate",
    "oracle_nuisances",
    "oracle_pd_nuisance",
    "run_scenario",
    "true_nuisances",
    "true_values",
]

#: seed-stream tag separating simulation draws from other library RNG use
SIM_TAG = 0x51AB

#: sample sizes of the growing-n design (correlation fixed at 0.2)
SCENARIO_N = (500, 1000, 1500, 2000)

#: correlations of the growing-rho design (sample size fixed at 1000)
SCENARIO_RHO = (0.0, 0.2, 0.4, 0.6)

#: estimators compared per replication
METHODS = ("univariate-plain", "univariate-debiased", "gam", "pd-plain", "pd-debiased")

#: nuisance variants run on every draw
ARMS = ("feasible", "oracle")

#: trimmed modifier support over which errors are integrated
TRIM = (-2.0, 2.0)

#: evaluation-grid nodes on the trimmed support (81 is a sensitivity setting)
DEFAULT_GRID_NODES = 41

#: replication-failure fraction above which a scenario aborts
_FAIL_FRAC = 0.05

_MODIFIERS = ModifierSpec(("v1", "v2"), ("continuous", "continuous"))
_RIDGE = LearnerSpec(kind="linear_ridge")


# ---------------------------------------------------------------------------
# data-generating process


@dataclass(frozen=True)
class DgpConfig:
    """Configuration of one synthetic draw.

    ``oracle`` selects known rather than fitted nuisances in consumers that
    accept a config (it does not change the data itself).
    """

    n: int
    rho: float = 0.2
    seed: int = 0
    oracle: bool = False

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ParameterError("n must be a positive integer")
        if not -1.0 < float(self.rho) < 1.0:
            raise ParameterError("rho must lie strictly inside (-1, 1)")


def _generate_arrays(n: int, rho: float, rng: np.random.Generator) -> Dataset:
    w = rng.standard_normal(n)
    z1 = rng.standard_normal(n)
    z2 = rng.standard_normal(n)
    v1 = z1
    v2 = rho * z1 + math.sqrt(1.0 - rho * rho) * z2
    pi = expit(0.4 * w - 0.2 * v1 - 0.2 * v2)
    a = (rng.random(n) < pi).astype(np.float64)
    mu1 = w + 1.5 * v1 - 0.5 * v2
    mu0 = 0.5 * w + 0.5 * v1 - 1.5 * v2
    y = a * mu1 + (1.0 - a) * mu0 + rng.standard_normal(n)
    return Dataset(
        covariates=np.column_stack([w, v1, v2]),
        treatment=a,
        outcome=y,
        covariate_names=("w", "v1", "v2"),
    )


def generate(cfg: DgpConfig) -> Dataset:
    """Draw one dataset from the benchmark model (equal seeds, equal data)."""
    return _generate_arrays(cfg.n, cfg.rho, np.random.default_rng(cfg.seed))


def true_values(cfg: DgpConfig, target: str, point=None):
    """Closed-form truth for a named target.

    ``tau1``/``theta1`` take modifier values, ``tau_v`` pairs ``(v1, v2)``,
    ``tau_x`` triples ``(w, v1, v2)`` (stacked in the trailing axis); ``ate``
    ignores the point. Scalar points give a float back.
    """
    if target == "ate":
        return 0.0
    if point is None:
        raise ParameterError(f"target {target!r} needs an evaluation point")
    p = np.asarray(point, dtype=np.float64)
    if target == "tau1":
        out = (1.0 + cfg.rho) * p
    elif target == "theta1":
        out = 1.0 * p
    elif target == "tau_v":
        if p.shape[-1:] != (2,):
            raise ParameterError("tau_v points are (v1, v2) pairs")
        out = p[..., 0] + p[..., 1]
    elif target == "tau_x":
        if p.shape[-1:] != (3,):
            raise ParameterError("tau_x points are (w, v1, v2) triples")
        out = 0.5 * p[..., 0] + p[..., 1] + p[..., 2]
    else:
        raise ParameterError(f"unknown target {target!r}")
    return float(out) if out.ndim == 0 else out


def true_nuisances(data: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact propensity and arm means recomputed from the covariates."""
    w, v1, v2 = data.column("w"), data.column("v1"), data.column("v2")
    pi = expit(0.4 * w - 0.2 * v1 - 0.2 * v2)
    mu1 = w + 1.5 * v1 - 0.5 * v2
    mu0 = 0.5 * w + 0.5 * v1 - 1.5 * v2
    return pi, mu0, mu1


def oracle_nuisances(data: Dataset, folds: int = 2, seed: int = 0) -> NuisanceEstimates:
    """Nuisance bundle carrying the exact propensity and arm means."""
    pi, mu0, mu1 = true_nuisances(data)
    return NuisanceEstimates.from_arrays(data.n, pi, mu0, mu1, folds=folds, seed=seed)


class _TrueSurface:
    """Known effect-surface regression: predicts v1 + v2 on modifier rows."""

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X[:, 0] + X[:, 1]


def oracle_pd_nuisance(data: Dataset, nuis: NuisanceEstimates, rho: float,
                       modifier: str = "v1") -> PdNuisance:
    """Partial-dependence ingredients built from the known model.

    The conditional law of either modifier given the other is normal with
    mean ``rho`` times the partner and variance ``1 - rho**2``; the marginal
    is standard normal; the surface projection is ``v1 + v2``.
    """
    names = ("v1", "v2")
    if modifier not in names:
        raise ParameterError(f"modifier must be one of {names}, got {modifier!r}")
    j = names.index(modifier)
    V = np.column_stack([data.column("v1"), data.column("v2")])
    model = _TrueSurface()
    sd = math.sqrt(1.0 - rho * rho)
    return PdNuisance(
        j=j,
        modifiers=V,
        phi=pseudo_cate(data, nuis),
        tau_x=nuis.mu1 - nuis.mu0,
        tau_v=model.predict(V),
        cond_density=norm.pdf(V[:, j], loc=rho * V[:, 1 - j], scale=sd),
        marg_density=norm.pdf(V[:, j]),
        fold_of=nuis.assignment.fold_of,
        tau_models=(model,) * nuis.assignment.folds,
        densities=(),
    )


# ---------------------------------------------------------------------------
# scenario runner


@dataclass(frozen=True)
class ScenarioRow:
    """One (estimator, nuisance arm, setting) cell of a scenario table."""

    method: str
    arm: str
    setting: float
    rmse: float
    mc_se: float
    reps_ok: int
    reps_failed: int


@dataclass(frozen=True)
class ScenarioResult:
    """Long-format RMSE table for one scenario, plus its provenance."""

    kind: str
    setting_name: str
    settings: tuple[float, ...]
    methods: tuple[str, ...]
    arms: tuple[str, ...]
    reps: int
    seed: int
    grid_nodes: int
    rows: tuple[ScenarioRow, ...]
    failures: tuple[tuple[float, str, str, str], ...]

    def rmse(self, method: str, arm: str, setting: float) -> ScenarioRow:
        """The row for one estimator/arm/setting combination."""
        for row in self.rows:
            if row.method == method and row.arm == arm and row.setting == float(setting):
                return row
        raise ParameterError(
            f"no row for method={method!r}, arm={arm!r}, {self.setting_name}={setting}"
        )

    def to_csv(self, path) -> None:
        """Write the table in plot-ready long format."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "arm", self.setting_name, "rmse", "mc_se",
                             "reps_ok", "reps_failed"])
            for row in self.rows:
                writer.writerow([row.method, row.arm, repr(row.setting),
                                 repr(row.rmse), repr(row.mc_se),
                                 row.reps_ok, row.reps_failed])

    def as_dict(self) -> dict:
        """JSON-ready view of the table and its provenance."""
        return {
            "kind": self.kind,
            "setting_name": self.setting_name,
            "settings": list(self.settings),
            "methods": list(self.methods),
            "arms": list(self.arms),
            "reps": self.reps,
            "seed": self.seed,
            "grid_nodes": self.grid_nodes,
            "rows": [asdict(row) for row in self.rows],
            "failures": [list(f) for f in self.failures],
        }

    def to_json(self, path) -> None:
        """Write the table plus provenance as deterministic JSON."""
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")


def _curve_errors(v, phi, grid, truth):
    """Signed plain/debiased errors on the grid, or (None, reason)."""
    res = localpoly.curve(v, phi, grid=grid, mode="debiased", weights=False)
    if not res.ok.all():
        bad = int((~res.ok).sum())
        reason = res.diagnostics[0] if res.diagnostics else f"{bad} grid points degenerate"
        return None, None, reason
    return res.plain - truth, res.estimate - truth, ""


def _rep_errors(task):
    """All estimator errors for one replication (every method on one draw)."""
    n, rho, methods, arms, grid_nodes, seed, si, rep = task
    grid = np.linspace(TRIM[0], TRIM[1], grid_nodes)
    key = (seed, SIM_TAG, si, rep)
    data = _generate_arrays(n, rho, np.random.default_rng(np.random.SeedSequence(list(key))))
    fit_seed = int(np.random.SeedSequence(list(key) + [1]).generate_state(1)[0])
    v1 = data.column("v1")
    V = np.column_stack([v1, data.column("v2")])
    tau1 = (1.0 + rho) * grid
    theta1 = grid

    errors: dict[tuple[str, str], np.ndarray] = {}
    failures: list[tuple[str, str, str]] = []

    def record(method, arm, err, reason):
        if err is None:
            failures.append((method, arm, reason))
        else:
            errors[(method, arm)] = err

    for arm in arms:
        if arm == "feasible":
            nuis = fit_nuisances(data, folds=2, seed=fit_seed)
        else:
            nuis = oracle_nuisances(data, folds=2, seed=fit_seed)
        phi = pseudo_cate(data, nuis)

        if "univariate-plain" in methods or "univariate-debiased" in methods:
            plain, deb, reason = _curve_errors(v1, phi, grid, tau1)
            if "univariate-plain" in methods:
                record("univariate-plain", arm, plain, reason)
            if "univariate-debiased" in methods:
                record("univariate-debiased", arm, deb, reason)

        if "gam" in methods:
            try:
                afit = fit_additive(V, phi)
                record("gam", arm, afit.profile(0, grid) - theta1, "")
            except NumericError as exc:
                record("gam", arm, None, str(exc))

        if "pd-plain" in methods or "pd-debiased" in methods:
            try:
                # the dense-correlation settings can legitimately trip the
                # density-floor warning on a few draws; it is advisory here
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", DegenerateDensityWarning)
                    if arm == "feasible":
                        pdn = build_pd_nuisance(data, _MODIFIERS, "v1", nuis,
                                                effect_spec=_RIDGE,
                                                density_family="gaussian",
                                                seed=fit_seed)
                    else:
                        pdn = oracle_pd_nuisance(data, nuis, rho)
                    phi_pd = pseudo_pd(data, nuis, pdn)
                plain, deb, reason = _curve_errors(v1, phi_pd, grid, theta1)
            except NumericError as exc:
                plain = deb = None
                reason = str(exc)
            if "pd-plain" in methods:
                record("pd-plain", arm, plain, reason)
            if "pd-debiased" in methods:
                record("pd-debiased", arm, deb, reason)

    inside = v1[(v1 >= grid[0]) & (v1 <= grid[-1])]
    w_num = grid_cell_weights(inside, grid) * inside.size
    return errors, failures, w_num, inside.size


def _normalize_methods(methods) -> tuple[str, ...]:
    if methods is None:
        return METHODS
    if isinstance(methods, str):
        methods = (methods,)
    out = []
    for m in methods:
        if m not in METHODS:
            raise ParameterError(f"unknown method {m!r}; choose from {METHODS}")
        if m not in out:
            out.append(m)
    if not out:
        raise ParameterError("methods must name at least one estimator")
    return tuple(out)


def _normalize_arms(arms) -> tuple[str, ...]:
    if isinstance(arms, str):
        arms = (arms,)
    out = []
    for a in arms:
        if a not in ARMS:
            raise ParameterError(f"unknown arm {a!r}; choose from {ARMS}")
        if a not in out:
            out.append(a)
    if not out:
        raise ParameterError("arms must name at least one nuisance variant")
    return tuple(out)


def run_scenario(kind: str, methods=None, reps: int = 200, seed: int = 0,
                 threads: int = 1, arms=ARMS, settings=None,
                 grid_nodes: int = DEFAULT_GRID_NODES) -> ScenarioResult:
    """Replicated RMSE comparison across estimators.

    ``vary_n`` sweeps the sample size at correlation 0.2; ``vary_rho`` sweeps
    the modifier correlation at n = 1000. Each replication draws one dataset
    and runs every requested estimator on it under every requested arm.
    Signed errors are taken on an equispaced grid over the trimmed support
    and weighted by the replication-pooled empirical modifier distribution;
    the table reports the median per-replication weighted RMSE and a
    bootstrap standard error of that median. Replication failures are
    counted per cell and abort the scenario once they reach 5%.

    ``settings`` overrides the swept values (for scaled-down smoke runs);
    determinism: results depend on ``seed`` only, never on ``threads``.
    """
    if kind not in ("vary_n", "vary_rho"):
        raise ParameterError("kind must be 'vary_n' or 'vary_rho'")
    if reps < 20:
        raise ParameterError("scenarios need at least 20 replications")
    if grid_nodes < 2:
        raise ParameterError("grid_nodes must be at least 2")
    if threads < 1:
        raise ParameterError("threads must be at least 1")
    methods = _normalize_methods(methods)
    arms = _normalize_arms(arms)

    if kind == "vary_n":
        values = SCENARIO_N if settings is None else tuple(settings)
        pairs = [(int(v), 0.2) for v in values]
        setting_name = "n"
    else:
        values = SCENARIO_RHO if settings is None else tuple(settings)
        pairs = [(1000, float(v)) for v in values]
        setting_name = "rho"
    for n_i, rho_i in pairs:
        DgpConfig(n=n_i, rho=rho_i)  # validates the swept values

    tasks = [(n_i, rho_i, methods, arms, grid_nodes, seed, si, rep)
             for si, (n_i, rho_i) in enumerate(pairs)
             for rep in range(reps)]
    results = {}
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for task, out in zip(tasks, pool.map(_rep_errors, tasks, chunksize=4)):
                results[task[-2:]] = out
    else:
        for task in tasks:
            results[task[-2:]] = _rep_errors(task)

    grid_count = grid_nodes
    rows = []
    failure_log = []
    for si, (n_i, rho_i) in enumerate(pairs):
        value = float(values[si])
        w_sum = np.zeros(grid_count)
        m_sum = 0
        per = {(m, a): [] for m in methods for a in arms}
        for rep in range(reps):
            errors, failures, w_num, m = results[(si, rep)]
            w_sum += w_num
            m_sum += m
            for cell in per:
                per[cell].append(errors.get(cell))
            for method, arm, reason in failures:
                failure_log.append((value, method, arm, reason))
        w_pool = w_sum / m_sum
        for method in methods:
            for arm in arms:
                errs = [e for e in per[(method, arm)] if e is not None]
                n_fail = reps - len(errs)
                if n_fail >= _FAIL_FRAC * reps:
                    reasons = [f for f in failure_log
                               if f[0] == value and f[1] == method and f[2] == arm]
                    raise NumericError(
                        f"{method}/{arm} failed {n_fail}/{reps} replications at "
                        f"{setting_name}={value}: {reasons[0][3] if reasons else 'unknown'}"
                    )
                rep_rmse = np.sqrt(np.square(np.asarray(errs)) @ w_pool)
                boot_rng = np.random.default_rng(np.random.SeedSequence(
                    [seed, SIM_TAG, 0xB001, si, METHODS.index(method), ARMS.index(arm)]))
                idx = boot_rng.integers(0, rep_rmse.size, size=(200, rep_rmse.size))
                boots = np.median(rep_rmse[idx], axis=1)
                rows.append(ScenarioRow(
                    method=method, arm=arm, setting=value,
                    rmse=float(np.median(rep_rmse)), mc_se=float(boots.std()),
                    reps_ok=len(errs), reps_failed=n_fail,
                ))

    return ScenarioResult(
        kind=kind, setting_name=setting_name, settings=tuple(float(v) for v in values),
        methods=methods, arms=arms, reps=reps, seed=seed, grid_nodes=grid_nodes,
        rows=tuple(rows), failures=tuple(failure_log),
    )


# ---------------------------------------------------------------------------
# calibration checks


def _ate_worker(task):
    n, rho, alpha, seed, rep = task
    key = [seed, SIM_TAG, 0xA7E, rep]
    data = _generate_arrays(n, rho, np.random.default_rng(np.random.SeedSequence(key)))
    fit_seed = int(np.random.SeedSequence(key + [1]).generate_state(1)[0])
    try:
        res = estimate_ate(data, fit_nuisances(data, folds=2, seed=fit_seed), alpha=alpha)
    except NumericError:
        return None
    return bool(res.ci_lo <= 0.0 <= res.ci_hi)


def ate_coverage(reps: int = 200, n: int = 2000, rho: float = 0.2,
                 alpha: float = 0.05, seed: int = 0, threads: int = 1) -> CoverageResult:
    """Fraction of replications whose average-effect interval covers zero."""
    if reps < 1:
        raise ParameterError("reps must be at least 1")
    DgpConfig(n=n, rho=rho)
    tasks = [(n, rho, alpha, seed, rep) for rep in range(reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_ate_worker, tasks, chunksize=8))
    else:
        outcomes = [_ate_worker(t) for t in tasks]
    failures = sum(1 for o in outcomes if o is None)
    done = reps - failures
    covered = sum(1 for o in outcomes if o)
    return CoverageResult(coverage=covered / done if done else float("nan"),
                          reps=reps, failures=failures)


def band_coverage(reps: int = 100, n: int = 2000, rho: float = 0.2,
                  alpha: float = 0.05, seed: int = 0, oracle: bool = False,
                  grid_nodes: int = DEFAULT_GRID_NODES) -> CoverageResult:
    """Uniform-band coverage of the univariate effect curve on the trimmed grid."""
    DgpConfig(n=n, rho=rho)
    grid = np.linspace(TRIM[0], TRIM[1], grid_nodes)

    def dgp(rng):
        data = _generate_arrays(n, rho, rng)
        if oracle:
            nuis = oracle_nuisances(data, folds=2, seed=int(rng.integers(2**31)))
        else:
            nuis = fit_nuisances(data, folds=2, seed=int(rng.integers(2**31)))
        truth = lambda g: (1.0 + rho) * np.asarray(g, dtype=np.float64)
        return data.column("v1"), pseudo_cate(data, nuis), truth

    return gaussian_coverage_check(dgp, {"mode": "debiased", "grid": grid},
                                   reps=reps, alpha=alpha, seed=seed)
