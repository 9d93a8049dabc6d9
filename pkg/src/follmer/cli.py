"""Command-line front end: declarative TOML experiments, reproducible outputs.

Subcommands: sample, fit, tune, invariance, diagnose.  One config file is one
experiment; all randomness flows from the mandatory base seed through the
documented stream mixer, so reruns with the same config and seed produce
byte-identical data files.  Exit codes partition outcomes: 0 success,
2 config error, 3 simulation divergence, 4 fitting failure, 5 assertion or
diagnostic failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

try:
    import tomllib
except ModuleNotFoundError:                     # Python 3.10
    import tomli as tomllib

from . import __version__
from .analysis import (
    drift_error_moments,
    exp_decay_error,
    kl_path,
    optimal_g,
    sample_distance,
    schedule_invariance,
    variance_identity_check,
    zero_error,
)
from .drifts import (
    BaselineDrift,
    EstimatedDrift,
    RegressionEstimator,
    BasisSpec,
    TunedDrift,
    chebyshev_knots,
    fit_follmer_regression,
    fit_regression,
    follmer_tuned_drift,
    lipschitz_bound,
    score_field,
    singular_decomposition,
)
from .errors import (
    BoundUnavailableError,
    ConfigError,
    FittingError,
    FollmerError,
    InvalidDiffusionError,
    MonotonicityError,
    SimulationDivergenceError,
)
from .rng import derive_stream_seed, stream_generator
from .schedules import (
    Schedule,
    coefficients_at,
    follmer_schedule_data_for,
    g_baseline_fn,
    g_constant_fn,
    g_follmer_fn,
    g_follmer_squared,
    g_table_fn,
    get_schedule,
    noise_level_map,
    validate_schedule,
)
from .sde import IntegratorConfig, simulate, simulate_singular
from .targets import GaussianMixtureTarget, make_quadrature_target, marginal_moments

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_FITTING = 4
EXIT_ASSERTION = 5


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureComponentSpec:
    weight: float
    mean: tuple
    covariance: tuple


@dataclass(frozen=True)
class TargetSpec:
    kind: str
    eta: float = 0.0
    components: tuple = ()
    name: str = ""
    scale: float = 1.0
    std: float = 1.0


@dataclass(frozen=True)
class DriftSpec:
    kind: str = "oracle"
    estimator_path: str = ""


@dataclass(frozen=True)
class GSpec:
    kind: str = "baseline"
    value: float = 1.0
    times: tuple = ()
    values: tuple = ()


@dataclass(frozen=True)
class IntegratorSpec:
    scheme: str = "euler_maruyama"
    steps: int = 1000
    paths: int = 10000
    t_start: float = 0.0
    t_end: float = 1.0
    terminal_clip: float = 1e-3
    store_times: tuple = ()
    store_stride: int = 1
    grid: str = "uniform"


@dataclass(frozen=True)
class FittingSpec:
    basis: str = "affine"
    degree: int = 1
    knots: int = 64
    knot_min: float = 1e-3
    knot_max: float = 0.999
    samples_per_knot: int = 10000
    allow_ridge: bool = False
    objective: str = "baseline"
    terminal_cut: float = 1e-3


@dataclass(frozen=True)
class AnalysisSpec:
    truncation: float = 1e-3
    loss_model: str = "constant"
    loss_value: float = 1.0
    error_model: str = "exp_decay"
    error_amplitude: float = 0.1
    r_max: float = 50.0
    mc_samples: int = 4096
    invariance_tolerance: float = 0.01
    schedules: tuple = ()
    tune_grid: tuple = ()


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    schedule: str
    target: TargetSpec
    drift: DriftSpec = DriftSpec()
    g: GSpec = GSpec()
    integrator: IntegratorSpec = IntegratorSpec()
    fitting: FittingSpec = FittingSpec()
    analysis: AnalysisSpec = AnalysisSpec()


def _require(table: dict, key: str, section: str):
    if key not in table:
        raise ConfigError(f"missing required field [{section}].{key}")
    return table[key]


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a TOML experiment description."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None

    run = raw.get("run", {})
    if "seed" not in run:
        raise ConfigError("missing required field [run].seed (no wall-clock default)")
    seed = int(run["seed"])

    sched_tbl = raw.get("schedule", {})
    schedule = _require(sched_tbl, "name", "schedule")

    tgt_tbl = raw.get("target", {})
    kind = _require(tgt_tbl, "kind", "target")
    if kind == "gaussian_mixture":
        comps = tgt_tbl.get("components", [])
        if not comps:
            raise ConfigError("gaussian_mixture target needs [[target.components]]")
        components = tuple(
            MixtureComponentSpec(
                weight=float(_require(c, "weight", "target.components")),
                mean=tuple(float(v) for v in _require(c, "mean", "target.components")),
                covariance=tuple(tuple(float(v) for v in row)
                                 for row in _require(c, "covariance", "target.components")),
            )
            for c in comps
        )
        target = TargetSpec(kind=kind, eta=float(tgt_tbl.get("eta", 0.0)),
                            components=components)
    elif kind == "quadrature":
        target = TargetSpec(kind=kind, name=_require(tgt_tbl, "name", "target"),
                            scale=float(tgt_tbl.get("scale", 1.0)),
                            std=float(tgt_tbl.get("std", 1.0)))
    else:
        raise ConfigError(f"unknown [target].kind {kind!r}")

    d_tbl = raw.get("drift", {})
    drift = DriftSpec(kind=d_tbl.get("kind", "oracle"),
                      estimator_path=d_tbl.get("estimator_path", ""))
    if drift.kind not in ("oracle", "estimated"):
        raise ConfigError(f"unknown [drift].kind {drift.kind!r}")
    if drift.kind == "estimated" and not drift.estimator_path:
        raise ConfigError("estimated drift requires [drift].estimator_path")

    g_tbl = raw.get("g", {})
    g = GSpec(kind=g_tbl.get("kind", "baseline"),
              value=float(g_tbl.get("value", 1.0)),
              times=tuple(float(v) for v in g_tbl.get("times", ())),
              values=tuple(float(v) for v in g_tbl.get("values", ())))
    if g.kind not in ("baseline", "follmer", "constant", "table"):
        raise ConfigError(f"unknown [g].kind {g.kind!r}")
    if g.kind == "table" and (not g.times or len(g.times) != len(g.values)):
        raise ConfigError("[g] table needs matching times and values")

    i_tbl = raw.get("integrator", {})
    integ = IntegratorSpec(
        scheme=i_tbl.get("scheme", "euler_maruyama"),
        steps=int(i_tbl.get("steps", 1000)),
        paths=int(i_tbl.get("paths", 10000)),
        t_start=float(i_tbl.get("t_start", 0.0)),
        t_end=float(i_tbl.get("t_end", 1.0)),
        terminal_clip=float(i_tbl.get("terminal_clip", 1e-3)),
        store_times=tuple(float(v) for v in i_tbl.get("store_times", ())),
        store_stride=int(i_tbl.get("store_stride", 1)),
        grid=i_tbl.get("grid", "uniform"),
    )
    if integ.grid not in ("uniform", "cosine"):
        raise ConfigError(f"unknown [integrator].grid {integ.grid!r}")

    f_tbl = raw.get("fitting", {})
    fitting = FittingSpec(
        basis=f_tbl.get("basis", "affine"),
        degree=int(f_tbl.get("degree", 1)),
        knots=int(f_tbl.get("knots", 64)),
        knot_min=float(f_tbl.get("knot_min", 1e-3)),
        knot_max=float(f_tbl.get("knot_max", 0.999)),
        samples_per_knot=int(f_tbl.get("samples_per_knot", 10000)),
        allow_ridge=bool(f_tbl.get("allow_ridge", False)),
        objective=f_tbl.get("objective", "baseline"),
        terminal_cut=float(f_tbl.get("terminal_cut", 1e-3)),
    )
    if fitting.objective not in ("baseline", "follmer"):
        raise ConfigError(f"unknown [fitting].objective {fitting.objective!r}")

    a_tbl = raw.get("analysis", {})
    analysis = AnalysisSpec(
        truncation=float(a_tbl.get("truncation", 1e-3)),
        loss_model=a_tbl.get("loss_model", "constant"),
        loss_value=float(a_tbl.get("loss_value", 1.0)),
        error_model=a_tbl.get("error_model", "exp_decay"),
        error_amplitude=float(a_tbl.get("error_amplitude", 0.1)),
        r_max=float(a_tbl.get("r_max", 50.0)),
        mc_samples=int(a_tbl.get("mc_samples", 4096)),
        invariance_tolerance=float(a_tbl.get("invariance_tolerance", 0.01)),
        schedules=tuple(a_tbl.get("schedules", ())),
        tune_grid=tuple(float(v) for v in a_tbl.get("tune_grid", ())),
    )
    if analysis.loss_model not in ("constant", "estimator"):
        raise ConfigError(f"unknown [analysis].loss_model {analysis.loss_model!r}")
    if analysis.error_model not in ("exp_decay", "zero"):
        raise ConfigError(f"unknown [analysis].error_model {analysis.error_model!r}")

    return ExperimentConfig(seed=seed, schedule=schedule, target=target,
                            drift=drift, g=g, integrator=integ,
                            fitting=fitting, analysis=analysis)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        r = repr(float(v))
        return r if any(c in r for c in ".einf") else r + ".0"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {v!r} to TOML")


def serialize_config(cfg: ExperimentConfig) -> str:
    """Emit the canonical TOML form; parse(serialize(parse(x))) == parse(x)."""
    lines = ["[run]", f"seed = {cfg.seed}", "", "[schedule]",
             f"name = {_toml_value(cfg.schedule)}", "", "[target]",
             f"kind = {_toml_value(cfg.target.kind)}"]
    if cfg.target.kind == "gaussian_mixture":
        lines.append(f"eta = {_toml_value(cfg.target.eta)}")
        for c in cfg.target.components:
            lines += ["", "[[target.components]]",
                      f"weight = {_toml_value(c.weight)}",
                      f"mean = {_toml_value(list(c.mean))}",
                      f"covariance = {_toml_value([list(r) for r in c.covariance])}"]
    else:
        lines += [f"name = {_toml_value(cfg.target.name)}",
                  f"scale = {_toml_value(cfg.target.scale)}",
                  f"std = {_toml_value(cfg.target.std)}"]
    lines += ["", "[drift]", f"kind = {_toml_value(cfg.drift.kind)}"]
    if cfg.drift.estimator_path:
        lines.append(f"estimator_path = {_toml_value(cfg.drift.estimator_path)}")
    lines += ["", "[g]", f"kind = {_toml_value(cfg.g.kind)}",
              f"value = {_toml_value(cfg.g.value)}"]
    if cfg.g.times:
        lines += [f"times = {_toml_value(list(cfg.g.times))}",
                  f"values = {_toml_value(list(cfg.g.values))}"]
    i = cfg.integrator
    lines += ["", "[integrator]",
              f"scheme = {_toml_value(i.scheme)}",
              f"steps = {i.steps}", f"paths = {i.paths}",
              f"t_start = {_toml_value(i.t_start)}",
              f"t_end = {_toml_value(i.t_end)}",
              f"terminal_clip = {_toml_value(i.terminal_clip)}",
              f"store_times = {_toml_value(list(i.store_times))}",
              f"store_stride = {i.store_stride}",
              f"grid = {_toml_value(i.grid)}"]
    f = cfg.fitting
    lines += ["", "[fitting]",
              f"basis = {_toml_value(f.basis)}", f"degree = {f.degree}",
              f"knots = {f.knots}",
              f"knot_min = {_toml_value(f.knot_min)}",
              f"knot_max = {_toml_value(f.knot_max)}",
              f"samples_per_knot = {f.samples_per_knot}",
              f"allow_ridge = {_toml_value(f.allow_ridge)}",
              f"objective = {_toml_value(f.objective)}",
              f"terminal_cut = {_toml_value(f.terminal_cut)}"]
    a = cfg.analysis
    lines += ["", "[analysis]",
              f"truncation = {_toml_value(a.truncation)}",
              f"loss_model = {_toml_value(a.loss_model)}",
              f"loss_value = {_toml_value(a.loss_value)}",
              f"error_model = {_toml_value(a.error_model)}",
              f"error_amplitude = {_toml_value(a.error_amplitude)}",
              f"r_max = {_toml_value(a.r_max)}",
              f"mc_samples = {a.mc_samples}",
              f"invariance_tolerance = {_toml_value(a.invariance_tolerance)}",
              f"schedules = {_toml_value(list(a.schedules))}",
              f"tune_grid = {_toml_value(list(a.tune_grid))}"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_schedule(cfg: ExperimentConfig) -> Schedule:
    try:
        s = get_schedule(cfg.schedule)
    except FollmerError as exc:
        raise ConfigError(str(exc)) from None
    report = validate_schedule(s)
    if not report.is_valid:
        raise ConfigError(f"schedule {s.name!r} invalid: {report.violations[0]}")
    return s


def build_target(cfg: ExperimentConfig):
    t = cfg.target
    if t.kind == "gaussian_mixture":
        return GaussianMixtureTarget(
            weights=[c.weight for c in t.components],
            means=[list(c.mean) for c in t.components],
            covariances=[[list(r) for r in c.covariance] for c in t.components],
            smoothing_eta=t.eta,
        )
    params = {"scale": t.scale, "std": t.std}
    return make_quadrature_target(t.name, **params)


def build_g(cfg: ExperimentConfig, s: Schedule):
    g = cfg.g
    if g.kind == "baseline":
        return g_baseline_fn(s)
    if g.kind == "follmer":
        return g_follmer_fn(s)
    if g.kind == "constant":
        return g_constant_fn(g.value)
    return g_table_fn(list(g.times), list(g.values))


def build_drift(cfg: ExperimentConfig, s: Schedule, target, base_dir: Path):
    if cfg.drift.kind == "estimated":
        path = Path(cfg.drift.estimator_path)
        if not path.is_absolute():
            path = base_dir / path
        try:
            est = RegressionEstimator.from_json(path.read_text())
        except (OSError, FittingError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load estimator: {exc}") from None
        if est.dim != target.dim:
            raise ConfigError(
                f"estimator dimension {est.dim} does not match target dimension "
                f"{target.dim}"
            )
        return EstimatedDrift(est)
    if cfg.g.kind == "baseline":
        return BaselineDrift(s, target)
    if cfg.g.kind == "follmer":
        return follmer_tuned_drift(s, target)
    g = build_g(cfg, s)
    try:
        return TunedDrift(s, target, g, g_name=getattr(g, "name", "custom"))
    except InvalidDiffusionError as exc:
        raise ConfigError(f"diffusion coefficient rejected: {exc}") from None


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2,
                               default=_json_default) + "\n")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, config_text: str) -> None:
    files = {
        p.name: _sha256(p)
        for p in sorted(out.iterdir())
        if p.is_file() and p.name != "manifest.json"
    }
    write_json(out / "manifest.json", {
        "command": command,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "files": files,
    })


def _prepare_out(args, config_text: str) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(config_text)
    return out


def _float_csv(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_sample(cfg: ExperimentConfig, args, config_text: str) -> int:
    s = build_schedule(cfg)
    target = build_target(cfg)
    drift = build_drift(cfg, s, target, Path(args.config).parent)
    g = build_g(cfg, s)
    i = cfg.integrator
    steps = args.steps if args.steps is not None else i.steps
    paths = args.paths if args.paths is not None else i.paths
    clip = args.terminal_clip if args.terminal_clip is not None else i.terminal_clip
    icfg = IntegratorConfig(
        scheme="euler_maruyama", step_count=steps, t_start=i.t_start,
        t_end=i.t_end, terminal_clip=clip, seed=cfg.seed,
        store_times=i.store_times, store_stride=i.store_stride,
        grid_kind=i.grid,
    )
    try:
        if i.scheme == "singular_integrating_factor":
            if cfg.g.kind != "follmer" or not s.beta_dot_zero_at_origin:
                raise ConfigError(
                    "the singular scheme requires g.kind = 'follmer' and a "
                    "schedule with beta_dot(0) = 0"
                )
            p, remainder = singular_decomposition(s, target)
            ensemble = simulate_singular(p, np.zeros(target.dim), remainder, g,
                                         icfg, paths, threads=args.threads)
        else:
            ensemble = simulate(drift, g, icfg, paths, dim=target.dim,
                                threads=args.threads)
    except SimulationDivergenceError as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        return EXIT_SIMULATION

    out = _prepare_out(args, config_text)
    ensemble.save_binary(out / "ensemble.bin")
    if ensemble.path_count * ensemble.times.size <= 200_000:
        ensemble.to_csv(out / "ensemble.csv")

    terminal = ensemble.terminal()
    summary = {
        "seed": cfg.seed,
        "paths": ensemble.path_count,
        "times": ensemble.times.tolist(),
        "terminal_mean": terminal.mean(axis=0).tolist(),
        "terminal_variance": terminal.var(axis=0, ddof=1).tolist(),
    }
    oracle = cfg.drift.kind == "oracle"
    if oracle:
        checks = []
        n = ensemble.path_count
        for t in ensemble.times:
            t = float(t)
            mean, cov = marginal_moments(target, s, t)
            emp = ensemble.marginal(t)
            emp_mean = emp.mean(axis=0)
            emp_var = emp.var(axis=0, ddof=1)
            var = np.diag(cov)
            se_mean = np.sqrt(np.maximum(var, 1e-300) / n)
            se_var = np.maximum(var, 1e-300) * math.sqrt(2.0 / n)
            ok = bool(np.all(np.abs(emp_mean - mean) <= 4.0 * se_mean + 1e-12)
                      and np.all(np.abs(emp_var - var) <= 4.0 * se_var + 1e-12))
            checks.append({"t": t, "pass": ok,
                           "mean_error": np.abs(emp_mean - mean).max(),
                           "variance_error": np.abs(emp_var - var).max()})
        summary["marginal_checks"] = checks
        summary["marginal_check"] = "pass" if all(c["pass"] for c in checks) else "fail"
        if ensemble.times[-1] == 1.0 and ensemble.path_count >= 2000:
            ref = target.sample(ensemble.path_count,
                                derive_stream_seed(cfg.seed, 9001))
            dist = sample_distance(terminal, ref,
                                   seed=derive_stream_seed(cfg.seed, 9002))
            summary["terminal_energy_distance"] = {
                "statistic": dist.statistic,
                "null_quantile_99": dist.null_quantile_99,
                "p_value": dist.p_value,
                "pass": dist.passes_null_test,
            }
    write_json(out / "summary.json", summary)
    write_manifest(out, "sample", config_text)
    print(f"marginal_check: {summary.get('marginal_check', 'n/a')}")
    return EXIT_OK


def cmd_fit(cfg: ExperimentConfig, args, config_text: str) -> int:
    s = build_schedule(cfg)
    target = build_target(cfg)
    f = cfg.fitting
    if f.samples_per_knot < 1:
        raise ConfigError("[fitting].samples_per_knot must be >= 1")
    spec = BasisSpec(kind=f.basis, degree=f.degree)
    grid = chebyshev_knots(f.knots, f.knot_min, f.knot_max)
    try:
        if f.objective == "follmer":
            data = follmer_schedule_data_for(s)
            a = lambda t: coefficients_at(s, t).a_ref
            g = g_follmer_fn(s)
            grid = grid[grid <= 1.0 - f.terminal_cut]
            est = fit_follmer_regression(a, g, data, target, spec,
                                         f.samples_per_knot, cfg.seed,
                                         time_grid=grid,
                                         terminal_cut=f.terminal_cut,
                                         threads=args.threads)
        else:
            est = fit_regression(s, target, spec, f.samples_per_knot,
                                 cfg.seed, time_grid=grid,
                                 threads=args.threads)
    except FittingError as exc:
        print(f"fitting failed: {exc}", file=sys.stderr)
        return EXIT_FITTING
    if est.metadata.get("ridge_applied") and not f.allow_ridge:
        print("fitting failed: design was rank-deficient and "
              "[fitting].allow_ridge is false", file=sys.stderr)
        return EXIT_FITTING

    out = _prepare_out(args, config_text)
    (out / "estimator.json").write_text(est.to_json() + "\n")
    losses = est.metadata["loss_per_knot"]
    floors = est.metadata.get("variance_floor_per_knot") or [None] * len(losses)
    with open(out / "loss_curve.csv", "w") as fh:
        fh.write("t,loss,variance_floor\n")
        for t, l, fl in zip(est.time_grid, losses, floors):
            fh.write(f"{_float_csv(t)},{_float_csv(l)},"
                     f"{'' if fl is None else _float_csv(fl)}\n")
    floor_vals = [v for v in floors if v is not None]
    summary = {
        "loss": est.metadata["loss"],
        "variance_floor": (float(trapezoid(floor_vals, est.time_grid))
                           if len(floor_vals) == len(losses) else None),
        "ridge_applied": bool(est.metadata.get("ridge_applied")),
        "knots": int(est.time_grid.size),
        "sample_count": f.samples_per_knot,
    }
    write_json(out / "summary.json", summary)
    write_manifest(out, "fit", config_text)
    print(f"empirical loss: {summary['loss']!r}")
    print(f"variance-floor estimate: {summary['variance_floor']!r}")
    return EXIT_OK


def _loss_profile(cfg: ExperimentConfig, s: Schedule, target, base_dir: Path):
    a = cfg.analysis
    if a.loss_model == "constant":
        return float(a.loss_value)
    if cfg.drift.kind != "estimated":
        raise ConfigError(
            "[analysis].loss_model = 'estimator' requires an estimated drift"
        )
    est_field = build_drift(cfg, s, target, base_dir)
    exact = BaselineDrift(s, target)
    grid = est_field.estimator.time_grid
    moments = drift_error_moments(s, target, exact, est_field, grid,
                                  mc_samples=a.mc_samples,
                                  seed=derive_stream_seed(cfg.seed, 77))
    return moments


def cmd_tune(cfg: ExperimentConfig, args, config_text: str) -> int:
    s = build_schedule(cfg)
    target = build_target(cfg)
    a = cfg.analysis
    loss = _loss_profile(cfg, s, target, Path(args.config).parent)
    grid = a.tune_grid or tuple(np.round(np.arange(0.05, 0.951, 0.05), 10))

    rows = []
    for t in grid:
        c = coefficients_at(s, float(t))
        og = optimal_g(s, float(t))
        rows.append((float(t), c.g_baseline, c.g_follmer, c.a_ref, og.psi_min))

    report_sigma = kl_path(s, g_baseline_fn(s), loss, truncation=a.truncation)
    report_follmer = kl_path(s, g_follmer_fn(s), loss, truncation=a.truncation)

    out = _prepare_out(args, config_text)
    with open(out / "tune_table.csv", "w") as fh:
        fh.write("t,sigma,g_follmer,a_ref,psi_min\n")
        for row in rows:
            fh.write(",".join(_float_csv(v) for v in row) + "\n")
    for name, rep in (("baseline", report_sigma), ("follmer", report_follmer)):
        write_json(out / f"kl_{name}.json", {
            "g": rep.g_name, "total": rep.total, "truncation": rep.truncation,
            "seed": cfg.seed,
            "t_grid": rep.t_grid.tolist(), "integrand": rep.integrand.tolist(),
            "L": rep.L_values.tolist(),
        })
        rep.to_csv(out / f"kl_{name}.csv")
    write_json(out / "summary.json", {
        "kl_baseline": report_sigma.total,
        "kl_follmer": report_follmer.total,
        "optimal_not_worse": report_follmer.total <= report_sigma.total * (1 + 1e-12),
    })
    write_manifest(out, "tune", config_text)
    print(f"KL(sigma) = {report_sigma.total!r}  KL(g_follmer) = {report_follmer.total!r}")
    if report_follmer.total > report_sigma.total * (1 + 1e-12):
        print("assertion failed: KL(g_follmer) > KL(sigma)", file=sys.stderr)
        return EXIT_ASSERTION
    return EXIT_OK


def _error_model(cfg: ExperimentConfig, dim: int):
    a = cfg.analysis
    if a.error_model == "zero":
        return zero_error()
    return exp_decay_error(a.error_amplitude, dim=dim)


def cmd_invariance(cfg: ExperimentConfig, args, config_text: str) -> int:
    a = cfg.analysis
    if len(a.schedules) < 2:
        raise ConfigError(
            "[analysis].schedules must list at least two schedules for the "
            "invariance check"
        )
    schedules = []
    for name in a.schedules:
        try:
            schedules.append(get_schedule(name))
        except FollmerError as exc:
            raise ConfigError(str(exc)) from None
    target = build_target(cfg)
    err = _error_model(cfg, target.dim)
    try:
        result = schedule_invariance(schedules, target, err,
                                     mc_samples=a.mc_samples, seed=cfg.seed,
                                     r_max=a.r_max)
    except MonotonicityError as exc:
        print(f"invariance check failed: {exc}", file=sys.stderr)
        return EXIT_ASSERTION

    out = _prepare_out(args, config_text)
    write_json(out / "invariance.json", {
        "totals": result.totals,
        "kl_star": result.kl_star_value,
        "max_relative_gap": result.max_relative_gap,
        "relative_gap_to_kl_star": result.relative_gap_to_kl_star,
        "tolerance": a.invariance_tolerance,
    })
    write_manifest(out, "invariance", config_text)
    print(f"KL* = {result.kl_star_value!r}  max relative gap = "
          f"{result.max_relative_gap!r}")
    if result.max_relative_gap > a.invariance_tolerance:
        print(f"gap exceeds tolerance {a.invariance_tolerance}", file=sys.stderr)
        return EXIT_ASSERTION
    return EXIT_OK


def cmd_diagnose(cfg: ExperimentConfig, args, config_text: str) -> int:
    s = build_schedule(cfg)
    target = build_target(cfg)
    checks = []
    notes = []

    # Noise-level monotonicity (hypothesis of the reference-process construction).
    try:
        noise_level_map(s)
        checks.append({"name": "noise_level_monotonicity", "pass": True})
        monotone = True
    except MonotonicityError as exc:
        checks.append({"name": "noise_level_monotonicity", "pass": False,
                       "detail": str(exc)})
        monotone = False

    # Variance identity of the reference process.
    if monotone:
        worst = 0.0
        ok = True
        for t in np.round(np.arange(0.1, 0.91, 0.1), 10):
            lhs, rhs = variance_identity_check(s, float(t))
            resid = abs(lhs - rhs) / max(1.0, abs(rhs))
            worst = max(worst, resid)
            ok = ok and resid <= 1e-8
        checks.append({"name": "variance_identity", "pass": ok,
                       "max_residual": worst, "tolerance": 1e-8})
    else:
        notes.append("variance identity skipped: monotonicity hypothesis fails")

    # Tweedie consistency (mixtures only: exact smoothed score available).
    if isinstance(target, GaussianMixtureTarget):
        rng = stream_generator(cfg.seed, 101)
        worst = 0.0
        for t in (0.1, 0.3, 0.5, 0.7, 0.9):
            x = rng.standard_normal((64, target.dim)) * 2.0
            via_drift = score_field(s, target, t, x)
            direct = target.marginal_score_given(
                s.beta(t), math.sqrt(t) * s.sigma(t), x)
            worst = max(worst, float(np.max(np.abs(via_drift - direct))))
        checks.append({"name": "tweedie_consistency", "pass": worst <= 1e-10,
                       "max_residual": worst, "tolerance": 1e-10})
    else:
        notes.append("tweedie consistency skipped: needs a mixture target")

    # Lipschitz bound margins.
    if isinstance(target, GaussianMixtureTarget):
        if target.smoothing_eta == 0.0:
            notes.append("smoothed Lipschitz bound skipped: target has eta = 0")
        rng = stream_generator(cfg.seed, 202)
        ok = True
        margins = []
        for t in (0.1, 0.5, 0.9):
            try:
                bound = lipschitz_bound(s, target, float(t))
            except (BoundUnavailableError, FollmerError) as exc:
                notes.append(f"lipschitz bound unavailable at t={t}: {exc}")
                continue
            mean, cov = marginal_moments(target, s, float(t))
            probes = mean + rng.standard_normal((1000, target.dim)) @ np.linalg.cholesky(
                cov + 1e-12 * np.eye(target.dim)).T
            emp = _empirical_gradient_max(s, target, float(t), probes)
            margins.append({"t": t, "bound": bound, "empirical": emp})
            ok = ok and emp <= bound * (1 + 1e-6)
        checks.append({"name": "lipschitz_margin", "pass": ok, "points": margins})

    # Boundary limits of the optimal diffusion coefficient.
    if s.beta_dot_zero_at_origin:
        notes.append("boundary-limit check skipped: singular regime (beta_dot(0)=0)")
    elif s.beta_ddot_at_0 is None:
        notes.append("boundary-limit check skipped: beta_ddot_at_0 not supplied")
    else:
        t0 = 1e-6
        lhs = (g_follmer_squared(s, t0) - s.sigma(t0) ** 2) / t0
        want = (s.sigma(0.0) ** 2 * s.beta_ddot_at_0 / s.beta_dot(0.0)
                - 2.0 * s.sigma_dot(0.0) * s.sigma(0.0))
        resid = abs(lhs - want)
        checks.append({"name": "boundary_limit", "pass": resid <= 1e-3,
                       "residual": resid, "tolerance": 1e-3})

    # Soft data-processing sanity: with the exact drift the path KL is zero,
    # so terminal samples must pass the energy-distance null test.  Reported,
    # not asserted.
    if isinstance(target, GaussianMixtureTarget) and monotone:
        icfg = IntegratorConfig(step_count=400, t_start=0.0, t_end=1.0,
                                terminal_clip=1e-3, seed=cfg.seed,
                                store_stride=400)
        try:
            ens = simulate(BaselineDrift(s, target), g_baseline_fn(s), icfg,
                           4000, dim=target.dim, threads=args.threads)
            ref = target.sample(4000, derive_stream_seed(cfg.seed, 303))
            dist = sample_distance(ens.terminal(), ref,
                                   seed=derive_stream_seed(cfg.seed, 304))
            notes.append(
                "data-processing sanity (soft): kl_path total 0 for the exact "
                f"drift; terminal null test p = {dist.p_value:.4f} "
                f"({'pass' if dist.passes_null_test else 'flagged'})"
            )
        except SimulationDivergenceError as exc:
            notes.append(f"data-processing sanity skipped: {exc}")

    failing = [c["name"] for c in checks if not c["pass"]]
    out = _prepare_out(args, config_text)
    write_json(out / "diagnostics.json",
               {"checks": checks, "notes": notes, "failing": failing})
    write_manifest(out, "diagnose", config_text)
    for c in checks:
        print(f"{c['name']}: {'pass' if c['pass'] else 'FAIL'}")
    for n in notes:
        print(f"note: {n}")
    if failing:
        print("failing checks: " + ", ".join(failing), file=sys.stderr)
        return EXIT_ASSERTION
    return EXIT_OK


def _empirical_gradient_max(s: Schedule, target, t: float,
                            probes: np.ndarray) -> float:
    """Max spectral norm of the finite-difference Jacobian of the exact drift."""
    drift = BaselineDrift(s, target)
    h = 1e-5
    d = target.dim
    n = probes.shape[0]
    jac = np.empty((n, d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        jac[:, :, j] = (drift(t, probes + e) - drift(t, probes - e)) / (2 * h)
    return float(max(np.linalg.norm(jac[i], 2) for i in range(n)))


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="follmer",
        description="Point-source generative diffusion experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("sample", "simulate a generative SDE and check its marginals"),
        ("fit", "fit a drift estimator by per-knot least squares"),
        ("tune", "tabulate schedule coefficients and compare KL totals"),
        ("invariance", "check schedule invariance of the minimized KL"),
        ("diagnose", "run identity and bound diagnostics"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap (results are thread-count independent)")
        if name == "sample":
            p.add_argument("--paths", type=int, default=None,
                           help="override [integrator].paths")
            p.add_argument("--steps", type=int, default=None,
                           help="override [integrator].steps")
            p.add_argument("--terminal-clip", dest="terminal_clip", type=float,
                           default=None,
                           help="override [integrator].terminal_clip")
    return parser


_COMMANDS = {
    "sample": cmd_sample,
    "fit": cmd_fit,
    "tune": cmd_tune,
    "invariance": cmd_invariance,
    "diagnose": cmd_diagnose,
}


def main(argv: Optional[list] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config_text = Path(args.config).read_text()
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(config_text)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.out is None:
            args.out = Path(args.config).with_suffix("").name + "_out"
        return _COMMANDS[args.command](cfg, args, config_text)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationDivergenceError as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except FittingError as exc:
        print(f"fitting failed: {exc}", file=sys.stderr)
        return EXIT_FITTING


if __name__ == "__main__":
    sys.exit(main())
