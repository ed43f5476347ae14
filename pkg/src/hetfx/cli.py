"""Command-line frontend for batch effect analyses.

Subcommands cover the full pipeline -- average effect, univariate effect
curve, partial-dependence curve, additive decomposition, modifier importance,
and the simulation benchmark -- reading a TOML config file plus overriding
flags and writing JSON/CSV artifacts for external plotting.

Every artifact embeds the resolved configuration, the top-level seed, and the
library version; rerunning a command with the same config and seed produces
byte-identical files regardless of ``--threads``. Exit codes: 1 for
parameter/config problems, 2 for data problems, 3 for numeric failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, fields

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__, simlab
from .additive import component_band, fit_additive
from .bands import CurveEstimate, effect_curve
from .crossfit import estimate_ate, fit_nuisances, pseudo_cate
from .dataset import Dataset, ModifierSpec, modifier_matrix
from .errors import (DataError, HetfxError, NumericError, ParameterError,
                     SchemaError)
from .learners import LearnerSpec
from .pdcurve import pd_curve
from .vimp import vimp

__all__ = ["RunConfig", "build_dataset", "load_config", "main"]


# ---------------------------------------------------------------------------
# configuration

#: config-file schema: section -> key -> default (None = required elsewhere)
_DEFAULTS = {
    "data": {
        "input": "",
        "treatment": "a",
        "outcome": "y",
        "covariates": [],
        "modifiers": [],
    },
    "estimation": {
        "folds": 2,
        "seed": 0,
        "threads": 0,
        "propensity": "logistic",
        "outcome_model": "linear_ridge",
        "effect": "",
        "density": "kde",
        "oracle": False,
    },
    "curve": {
        "kernel": "uniform",
        "bandwidth": "loocv",
        "pilot": 0.0,
        "grid": [],
        "mode": "debiased",
        "alpha": 0.05,
        "draws": 2000,
    },
    "vimp": {
        "subsets": [],
    },
    "simulate": {
        "kind": "vary_n",
        "reps": 200,
        "methods": [],
        "arms": ["feasible", "oracle"],
        "settings": [],
        "grid_nodes": 41,
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Resolved run configuration: defaults <- config file <- flags.

    ``threads`` and the output directory are execution details and are left
    out of the provenance block embedded in artifacts, so reruns on different
    hardware or target directories stay byte-identical.
    """

    input: str
    treatment: str
    outcome: str
    covariates: tuple[str, ...]
    modifiers: tuple[str, ...]
    folds: int
    seed: int
    threads: int
    propensity: str
    outcome_model: str
    effect: str
    density: str
    oracle: bool
    kernel: str
    bandwidth: float | str
    pilot: float
    grid: tuple[float, float, int] | None
    mode: str
    alpha: float
    draws: int
    vimp_subsets: tuple[tuple[str, ...], ...]
    sim_kind: str
    sim_reps: int
    sim_methods: tuple[str, ...]
    sim_arms: tuple[str, ...]
    sim_settings: tuple[float, ...]
    sim_grid_nodes: int
    out: str

    def provenance(self) -> dict:
        skip = {"threads", "out"}
        doc = {}
        for f in fields(self):
            if f.name in skip:
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = [list(v) if isinstance(v, tuple) else v for v in value]
            doc[f.name] = value
        return doc


def _check_type(section: str, key: str, value, default):
    ok = True
    if key == "bandwidth":
        ok = value == "loocv" or isinstance(value, (int, float))
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    if not ok:
        raise ParameterError(f"config value [{section}] {key} has the wrong type")
    return value


def load_config(path: str | None) -> dict:
    """Parse and schema-check the TOML config file (missing path = defaults)."""
    merged = {sec: dict(values) for sec, values in _DEFAULTS.items()}
    if path is None:
        return merged
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ParameterError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ParameterError(f"config file {path} is not valid TOML: {exc}")
    for section, values in raw.items():
        if section not in merged:
            raise ParameterError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ParameterError(f"config section [{section}] must hold key-value pairs")
        for key, value in values.items():
            if key not in merged[section]:
                raise ParameterError(f"unknown config key [{section}] {key}")
            merged[section][key] = _check_type(section, key, value, _DEFAULTS[section][key])
    return merged


def _names(values, what: str) -> tuple[str, ...]:
    out = []
    for v in values:
        if not isinstance(v, str) or not v:
            raise ParameterError(f"{what} must be a list of column names")
        out.append(v)
    return tuple(out)


def _subsets(values) -> tuple[tuple[str, ...], ...]:
    out = []
    for entry in values:
        if isinstance(entry, str):
            out.append((entry,))
        elif isinstance(entry, list):
            out.append(_names(entry, "[vimp] subsets entries"))
        else:
            raise ParameterError("[vimp] subsets entries must be names or lists of names")
    return tuple(out)


def _grid_policy(values):
    if not values:
        return None
    if len(values) != 3:
        raise ParameterError("[curve] grid must be [lo, hi, count]")
    lo, hi, count = values
    if not isinstance(count, int) or count < 2:
        raise ParameterError("[curve] grid count must be an integer >= 2")
    if not hi > lo:
        raise ParameterError("[curve] grid needs hi > lo")
    return (float(lo), float(hi), int(count))


def _resolve_threads(flag_value, cfg_value: int) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get("HETFX_THREADS")
    if env is not None:
        try:
            value = int(env)
        except ValueError:
            raise ParameterError(f"HETFX_THREADS must be an integer, got {env!r}")
        if value >= 1:
            return value
        raise ParameterError("HETFX_THREADS must be at least 1")
    if cfg_value:
        return cfg_value
    return os.cpu_count() or 1


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the config file, and command-line overrides."""
    merged = load_config(args.config)
    data, est, curve = merged["data"], merged["estimation"], merged["curve"]
    if args.input is not None:
        data["input"] = args.input
    if args.seed is not None:
        est["seed"] = args.seed
    if args.folds is not None:
        est["folds"] = args.folds
    if args.alpha is not None:
        curve["alpha"] = args.alpha
    if getattr(args, "mode", None) is not None:
        curve["mode"] = args.mode

    if est["folds"] < 2:
        raise ParameterError("folds must be at least 2")
    if not 0.0 < curve["alpha"] < 1.0:
        raise ParameterError("alpha must be in (0, 1)")
    if curve["mode"] not in ("plain", "debiased"):
        raise ParameterError("mode must be 'plain' or 'debiased'")
    bandwidth = curve["bandwidth"]
    if bandwidth != "loocv":
        bandwidth = float(bandwidth)
        if bandwidth <= 0:
            raise ParameterError("bandwidth must be positive (or 'loocv')")
    pilot = float(curve["pilot"])
    if pilot < 0:
        raise ParameterError("pilot bandwidth must be nonnegative")

    return RunConfig(
        input=data["input"],
        treatment=data["treatment"],
        outcome=data["outcome"],
        covariates=_names(data["covariates"], "[data] covariates"),
        modifiers=_names(data["modifiers"], "[data] modifiers"),
        folds=est["folds"],
        seed=est["seed"],
        threads=_resolve_threads(args.threads, est["threads"]),
        propensity=est["propensity"],
        outcome_model=est["outcome_model"],
        effect=est["effect"],
        density=est["density"],
        oracle=est["oracle"],
        kernel=curve["kernel"],
        bandwidth=bandwidth,
        pilot=pilot,
        grid=_grid_policy(curve["grid"]),
        mode=curve["mode"],
        alpha=float(curve["alpha"]),
        draws=curve["draws"],
        vimp_subsets=_subsets(merged["vimp"]["subsets"]),
        sim_kind=merged["simulate"]["kind"],
        sim_reps=merged["simulate"]["reps"],
        sim_methods=_names(merged["simulate"]["methods"], "[simulate] methods"),
        sim_arms=_names(merged["simulate"]["arms"], "[simulate] arms"),
        sim_settings=tuple(float(v) for v in merged["simulate"]["settings"]),
        sim_grid_nodes=merged["simulate"]["grid_nodes"],
        out=args.out,
    )


# ---------------------------------------------------------------------------
# data plumbing


def load_table(path: str) -> tuple[tuple[str, ...], np.ndarray]:
    """Read a headed CSV of numeric columns into (names, matrix)."""
    if not path:
        raise ParameterError("no input file given (use --input or [data] input)")
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise DataError(f"input file not found: {path}")
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"input file {path} is empty")
        names = tuple(name.strip() for name in header)
        if len(set(names)) != len(names):
            raise SchemaError(f"input file {path} has duplicate column names")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"input file {path} has no data rows")
    try:
        matrix = np.array(rows, dtype=np.float64)
    except ValueError:
        raise DataError(f"input file {path} contains non-numeric values")
    if matrix.shape[1] != len(names):
        raise SchemaError(f"input file {path} has ragged rows")
    return names, matrix


def build_dataset(cfg: RunConfig) -> tuple[Dataset, ModifierSpec]:
    """Load the input table and assemble it per the configured column roles."""
    names, matrix = load_table(cfg.input)
    cols = {name: matrix[:, i] for i, name in enumerate(names)}
    for role, name in (("treatment", cfg.treatment), ("outcome", cfg.outcome)):
        if name not in cols:
            raise SchemaError(f"{role} column {name!r} not found in {cfg.input}")
    covariates = cfg.covariates or tuple(n for n in names
                                         if n not in (cfg.treatment, cfg.outcome))
    if not covariates:
        raise SchemaError("no covariate columns available")
    missing = [n for n in covariates if n not in cols]
    if missing:
        raise SchemaError(f"covariate columns not found: {', '.join(missing)}")
    data = Dataset(
        covariates=np.column_stack([cols[n] for n in covariates]),
        treatment=cols[cfg.treatment],
        outcome=cols[cfg.outcome],
        covariate_names=covariates,
    )
    modifiers = cfg.modifiers or covariates
    return data, ModifierSpec.infer(data, modifiers)


def _learner(value: str) -> LearnerSpec | None:
    """Parse a learner name, with '+' joining stack members."""
    if not value:
        return None
    if "+" in value:
        members = tuple(LearnerSpec(kind=part.strip()) for part in value.split("+"))
        return LearnerSpec(kind="stack", members=members)
    return LearnerSpec(kind=value)


def _nuisances(data: Dataset, cfg: RunConfig):
    if cfg.oracle:
        try:
            return simlab.oracle_nuisances(data, folds=cfg.folds, seed=cfg.seed)
        except HetfxError:
            raise DataError("oracle nuisances need the benchmark columns w, v1, v2")
    return fit_nuisances(data, folds=cfg.folds, seed=cfg.seed,
                         propensity_spec=_learner(cfg.propensity),
                         outcome_spec=_learner(cfg.outcome_model))


def _grid_array(cfg: RunConfig):
    if cfg.grid is None:
        return None
    lo, hi, count = cfg.grid
    return np.linspace(lo, hi, count)


def _bandwidths(cfg: RunConfig) -> tuple[float | None, float | None]:
    h = None if cfg.bandwidth == "loocv" else float(cfg.bandwidth)
    b = cfg.pilot or None
    return h, b


def _require_modifier(args, spec: ModifierSpec, continuous: bool = True) -> str:
    name = args.modifier
    if name is None:
        raise ParameterError("this command needs --modifier")
    if name not in spec.names:
        raise ParameterError(f"modifier {name!r} is not in the modifier set {spec.names}")
    if continuous and spec.kinds[spec.index(name)] != "continuous":
        raise ParameterError(f"modifier {name!r} is binary; curves need a continuous modifier")
    return name


# ---------------------------------------------------------------------------
# artifact writing


def _write_json(cfg: RunConfig, filename: str, payload: dict) -> str:
    payload = dict(payload)
    payload["config"] = cfg.provenance()
    payload["seed"] = cfg.seed
    payload["version"] = __version__
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, filename)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _curve_payload(est: CurveEstimate) -> dict:
    return {
        "grid": est.grid.tolist(),
        "estimate": est.estimate.tolist(),
        "pw_lo": est.pointwise_lo.tolist(),
        "pw_hi": est.pointwise_hi.tolist(),
        "unif_lo": est.uniform_lo.tolist(),
        "unif_hi": est.uniform_hi.tolist(),
        "sigma": est.sigma.tolist(),
        "h": est.h,
        "b": est.b,
        "alpha": est.alpha,
        "crit_pointwise": est.crit_pointwise,
        "crit_uniform": est.crit_uniform,
        "draws": est.draws,
        "n": est.n,
        "kind": est.kind,
        "target": est.target,
        "diagnostics": list(est.diagnostics),
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_ate(args) -> int:
    cfg = resolve_config(args)
    data, _ = build_dataset(cfg)
    res = estimate_ate(data, _nuisances(data, cfg), alpha=cfg.alpha)
    path = _write_json(cfg, "ate.json", {
        "ate": res.ate, "se": res.se, "ci_lo": res.ci_lo, "ci_hi": res.ci_hi,
        "alpha": res.alpha, "psi0": res.psi0, "psi1": res.psi1,
        "n": res.n, "folds": res.folds,
    })
    print(f"wrote {path}")
    return 0


def cmd_cate(args) -> int:
    cfg = resolve_config(args)
    data, spec = build_dataset(cfg)
    modifier = _require_modifier(args, spec)
    nuis = _nuisances(data, cfg)
    phi = pseudo_cate(data, nuis)
    h, b = _bandwidths(cfg)
    est = effect_curve(data.column(modifier), phi, grid=_grid_array(cfg), h=h, b=b,
                       kernel=cfg.kernel, mode=cfg.mode, alpha=cfg.alpha,
                       draws=cfg.draws, seed=cfg.seed)
    path = _write_json(cfg, f"curve_{modifier}.json",
                       {**_curve_payload(est), "modifier": modifier})
    print(f"wrote {path}")
    return 0


def cmd_pd(args) -> int:
    cfg = resolve_config(args)
    data, spec = build_dataset(cfg)
    modifier = _require_modifier(args, spec)
    nuis = _nuisances(data, cfg)
    h, b = _bandwidths(cfg)
    if cfg.oracle:
        rho = float(np.corrcoef(data.column("v1"), data.column("v2"))[0, 1])
        pdn = simlab.oracle_pd_nuisance(data, nuis, rho, modifier=modifier)
    else:
        pdn = None
    est, _ = pd_curve(data, spec, modifier, nuis, grid=_grid_array(cfg), h=h, b=b,
                      kernel=cfg.kernel, mode=cfg.mode, alpha=cfg.alpha,
                      draws=cfg.draws, seed=cfg.seed,
                      effect_spec=_learner(cfg.effect),
                      density_family=cfg.density, pdn=pdn)
    path = _write_json(cfg, f"curve_{modifier}.json",
                       {**_curve_payload(est), "modifier": modifier})
    print(f"wrote {path}")
    return 0


def cmd_additive(args) -> int:
    cfg = resolve_config(args)
    data, spec = build_dataset(cfg)
    nuis = _nuisances(data, cfg)
    phi = pseudo_cate(data, nuis)
    fit = fit_additive(modifier_matrix(data, spec), phi, kinds=spec.kinds)
    paths = []
    for j, name in enumerate(spec.names):
        grid = _grid_array(cfg) if spec.kinds[j] == "continuous" else None
        est = component_band(fit, j, grid=grid, alpha=cfg.alpha,
                             draws=cfg.draws, seed=cfg.seed)
        paths.append(_write_json(cfg, f"curve_{name}.json", {
            **_curve_payload(est), "modifier": name, "level": fit.level,
            "basis_size": fit.m,
        }))
    for path in paths:
        print(f"wrote {path}")
    return 0


def cmd_vimp(args) -> int:
    cfg = resolve_config(args)
    data, spec = build_dataset(cfg)
    subsets = cfg.vimp_subsets or tuple((name,) for name in spec.names)
    results = vimp(data, subsets, folds=cfg.folds, alpha=cfg.alpha, seed=cfg.seed,
                   propensity_spec=_learner(cfg.propensity),
                   outcome_spec=_learner(cfg.outcome_model),
                   effect_spec=_learner(cfg.effect))
    ordered = sorted(results, key=lambda r: (-r.psi_hat, r.label))
    os.makedirs(cfg.out, exist_ok=True)
    csv_path = os.path.join(cfg.out, "vimp.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subset", "psi_hat", "theta_hat", "se_theta",
                         "ci_lo", "ci_hi", "n_eval", "flagged"])
        for r in ordered:
            writer.writerow([r.label, repr(r.psi_hat), repr(r.theta_hat),
                             repr(r.se_theta), repr(r.ci_lo), repr(r.ci_hi),
                             r.n_eval, r.flagged])
    json_path = _write_json(cfg, "vimp.json", {
        "results": [{
            "subset": list(r.subset), "label": r.label,
            "psi_hat": r.psi_hat, "theta_hat": r.theta_hat,
            "se_theta": r.se_theta, "ci_lo": r.ci_lo, "ci_hi": r.ci_hi,
            "alpha": r.alpha, "n_eval": r.n_eval, "flagged": r.flagged,
        } for r in ordered],
    })
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    return 0


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    kind = args.kind or cfg.sim_kind
    res = simlab.run_scenario(
        kind,
        methods=cfg.sim_methods or None,
        reps=cfg.sim_reps,
        seed=cfg.seed,
        threads=cfg.threads,
        arms=cfg.sim_arms,
        settings=cfg.sim_settings or None,
        grid_nodes=cfg.sim_grid_nodes,
    )
    os.makedirs(cfg.out, exist_ok=True)
    csv_path = os.path.join(cfg.out, f"scenario_{kind}.csv")
    res.to_csv(csv_path)
    json_path = _write_json(cfg, f"scenario_{kind}.json", res.as_dict())
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors follow the package exit codes."""

    def error(self, message):
        raise ParameterError(message)


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--input", help="CSV input table (overrides [data] input)")
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--seed", type=int, help="top-level seed (overrides config)")
    common.add_argument("--threads", type=int,
                        help="worker cap (default: HETFX_THREADS or CPU count)")
    common.add_argument("--folds", type=int, help="cross-fitting folds")
    common.add_argument("--alpha", type=float, help="band/interval miscoverage level")

    parser = _Parser(prog="hetfx", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hetfx {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ate", parents=[common],
                   help="doubly-robust average effect with a Wald interval").set_defaults(fn=cmd_ate)

    for name, fn, blurb in (
        ("cate", cmd_cate, "univariate effect curve with confidence bands"),
        ("pd", cmd_pd, "partial-dependence effect curve with confidence bands"),
    ):
        p = sub.add_parser(name, parents=[common], help=blurb)
        p.add_argument("--modifier", help="modifier column the curve runs along")
        p.add_argument("--mode", choices=("plain", "debiased"),
                       help="second-stage fit (overrides [curve] mode)")
        p.set_defaults(fn=fn)

    p = sub.add_parser("additive", parents=[common],
                       help="additive decomposition with per-component bands")
    p.set_defaults(fn=cmd_additive)

    p = sub.add_parser("vimp", parents=[common],
                       help="modifier-importance shares with Wald intervals")
    p.set_defaults(fn=cmd_vimp)

    p = sub.add_parser("simulate", parents=[common],
                       help="replicated benchmark scenarios (RMSE tables)")
    p.add_argument("kind", nargs="?", choices=("vary_n", "vary_rho"),
                   help="scenario (default: [simulate] kind)")
    p.set_defaults(fn=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except HetfxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
