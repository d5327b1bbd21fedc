"""Command-line front end: ``ertacache {calibrate,run,sweep,verify,report}``.

Settings come from a JSON config file; command-line flags override config
values, which override built-in defaults. The resolved settings and where
each one came from are printed at startup (suppressed by ``--quiet``).

Exit codes: 0 success, 1 property failure or runtime error, 2 config error,
3 policy/config incompatibility, 4 empty input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import statistics
import sys
from collections import defaultdict
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .analysis import endpoint_metrics, verify_decomposition
from .calibration import (
    AGGREGATIONS,
    CalibrationError,
    aggregate_phi,
    build_policy,
    fit_rectification,
    log_ground_truth,
    make_prompts,
    reference_endpoints,
    search_policy,
    sweep_lambda,
)
from .field import (
    AffinePlusIdentityField,
    EvalCounter,
    FieldError,
    GaussianMixtureField,
    LatentShape,
    field_from_config,
    sample_noise,
)
from .policy_store import POLICY_SUFFIX, CachePolicy, PolicyError, load_policy, save_policy
from .rectify import RECTIFY_MODES, fit_kb, fit_kb_oracle_ls
from .sampler import cached_sample, full_sample, run_batch
from .schedule import build_schedule

log = logging.getLogger("ertacache")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_COMPAT = 3
EXIT_EMPTY = 4

DEFAULT_OUT = "erta_out"
METRICS_COLUMNS = [
    "config", "T", "seed", "mode", "rectify_mode", "n_cached", "evals", "eval_ratio",
    "mse_vs_reference", "psnr_vs_reference", "mse_vs_full", "wall_time",
]
PARETO_COLUMNS = [
    "lambda", "cached_steps", "eval_ratio", "endpoint_mse_vs_full", "endpoint_mse_vs_reference", "wall_speedup",
]


class ConfigError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


DEFAULTS = {
    "name": None,
    "field": {"kind": "gaussian-mixture", "dim": 16, "components": 3, "seed": 0},
    "shape": None,
    "steps": 50,
    "calibration_seeds": None,
    "calibration_prompts": 20,
    "seeds": [0, 1, 2, 3, 4],
    "lambda": 0.1,
    "lambdas": [0.0, 0.05, 0.1, 0.2, 0.4],
    "aggregation": "mean",
    "quantile": 0.5,
    "rectify_mode": "linearized",
    "adjust_timesteps": True,
    "t_ref_steps": 100_000,
    "workers": 1,
    "eval_delay": 0.0,
    "out": None,
}


@dataclass
class RunConfig:
    name: str
    field_spec: dict
    field: object
    shape: LatentShape
    T: int
    calibration_seeds: list
    seeds: list
    lam: float
    lambdas: list
    aggregation: str
    quantile: float
    rectify_mode: str
    adjust_timesteps: bool
    t_ref_steps: int
    workers: int
    eval_delay: float
    out: Path
    sources: dict = dc_field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.shape.n


def _seed_list(value, what):
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    try:
        seeds = [int(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a list of integers, got {value!r}") from None
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"{what} must be distinct, got {seeds}")
    if not seeds:
        raise ConfigError(f"{what} is empty")
    return seeds


def _float_list(value, what):
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    try:
        return [float(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a list of numbers, got {value!r}") from None


def read_config_file(path) -> tuple[dict, Path | None]:
    if path is None:
        return {}, None
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return doc, path


def resolve_config(args, overrides: dict) -> RunConfig:
    """Merge defaults < config file < flags into a validated :class:`RunConfig`."""
    doc, path = read_config_file(getattr(args, "config", None))
    merged, sources = {}, {}
    for key, default in DEFAULTS.items():
        if key in overrides and overrides[key] is not None:
            merged[key], sources[key] = overrides[key], "flag"
        elif key in doc:
            merged[key], sources[key] = doc[key], "config"
        else:
            merged[key], sources[key] = default, "default"
    if merged["out"] is None:
        env = os.environ.get("ERTA_OUT_DIR")
        merged["out"], sources["out"] = (env, "env") if env else (DEFAULT_OUT, "default")

    base_dir = path.parent if path is not None else None
    delay = float(merged["eval_delay"])
    if delay < 0:
        raise ConfigError(f"eval_delay must be >= 0, got {delay}")
    spec = dict(merged["field"])
    if delay > 0:
        spec["delay"] = delay
    try:
        fld = field_from_config(spec, base_dir)
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise ConfigError(f"bad field config: {exc}") from None

    try:
        shape = LatentShape.coerce(merged["shape"] if merged["shape"] is not None else fld.dim)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad latent shape: {exc}") from None
    if shape.n != fld.dim:
        raise ConfigError(f"latent shape {shape.as_list()} holds {shape.n} values, field dimension is {fld.dim}")

    T = merged["steps"]
    if isinstance(T, bool) or not isinstance(T, int) or T < 2:
        raise ConfigError(f"steps must be an integer >= 2, got {T!r}")
    if merged["calibration_seeds"] is not None:
        cal = _seed_list(merged["calibration_seeds"], "calibration_seeds")
    else:
        count = int(merged["calibration_prompts"])
        if count < 1:
            raise ConfigError(f"calibration_prompts must be >= 1, got {count}")
        cal = list(range(1000, 1000 + count))
    if merged["aggregation"] not in AGGREGATIONS:
        raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {merged['aggregation']!r}")
    if merged["rectify_mode"] not in RECTIFY_MODES:
        raise ConfigError(f"rectify_mode must be one of {RECTIFY_MODES}, got {merged['rectify_mode']!r}")
    lam = float(merged["lambda"])
    if not lam >= 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    workers = int(merged["workers"])
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    t_ref = int(merged["t_ref_steps"])
    if t_ref < 1000:
        raise ConfigError(f"t_ref_steps must be >= 1000, got {t_ref}")
    out = Path(merged["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} cannot be created: {exc}") from None
    name = merged["name"] or (path.stem if path is not None else "default")
    return RunConfig(
        name=str(name),
        field_spec=merged["field"],
        field=fld,
        shape=shape,
        T=T,
        calibration_seeds=cal,
        seeds=_seed_list(merged["seeds"], "seeds"),
        lam=lam,
        lambdas=_float_list(merged["lambdas"], "lambdas"),
        aggregation=merged["aggregation"],
        quantile=float(merged["quantile"]),
        rectify_mode=merged["rectify_mode"],
        adjust_timesteps=bool(merged["adjust_timesteps"]),
        t_ref_steps=t_ref,
        workers=workers,
        eval_delay=delay,
        out=out,
        sources=sources,
    )


def print_settings(cfg: RunConfig, keys, stream=None):
    stream = sys.stderr if stream is None else stream
    values = {
        "field": cfg.field_spec.get("kind"), "shape": cfg.shape.as_list(), "steps": cfg.T,
        "calibration_prompts": len(cfg.calibration_seeds), "seeds": cfg.seeds, "lambda": cfg.lam,
        "lambdas": cfg.lambdas, "aggregation": cfg.aggregation, "rectify_mode": cfg.rectify_mode,
        "adjust_timesteps": cfg.adjust_timesteps, "t_ref_steps": cfg.t_ref_steps, "workers": cfg.workers,
        "eval_delay": cfg.eval_delay, "out": str(cfg.out),
    }
    for key in keys:
        src = cfg.sources.get("calibration_seeds" if key == "calibration_prompts" and
                              cfg.sources.get("calibration_seeds") != "default" else key, "default")
        print(f"  {key} = {values[key]}  [{src}]", file=stream)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    return str(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _calibration_profile(cfg: RunConfig):
    prompts = make_prompts(cfg.field, cfg.calibration_seeds)
    return log_ground_truth(prompts, cfg.T, shape=cfg.shape)


# -- commands ---------------------------------------------------------------

def cmd_calibrate(cfg: RunConfig, args) -> int:
    profile = _calibration_profile(cfg)
    artifacts = search_policy(profile, cfg.lam, cfg.aggregation, cfg.quantile)
    policy = build_policy(profile, artifacts, cfg.adjust_timesteps, shape=cfg.shape)
    policy.provenance["config"] = cfg.name
    policy_path = cfg.out / f"{cfg.name}{POLICY_SUFFIX}"
    save_policy(policy, policy_path)

    phi = aggregate_phi(artifacts)
    fits = fit_rectification(artifacts)
    rows = []
    for i in range(cfg.T - 1, -1, -1):
        cached = i in phi
        rows.append([
            i, int(cached), float(artifacts.rel_l1_agg[cfg.T - 1 - i]), phi.get(i, 1.0),
            float(policy.dt[i]), fits[i].K if cached else 0.0, fits[i].B if cached else 0.0,
        ])
    report_path = cfg.out / f"{cfg.name}.calibration.csv"
    _write_csv(report_path, ["step", "cached", "rel_l1", "phi", "dt", "K", "B"], rows)
    if not args.quiet:
        print(f"cached {policy.n_cached} of {cfg.T} steps at lambda={cfg.lam}: {list(policy.cached_steps)}")
        print(f"policy  -> {policy_path}")
        print(f"report  -> {report_path}")
    return EXIT_OK


def _load_run_policy(cfg: RunConfig, path) -> CachePolicy:
    policy = load_policy(path)
    if cfg.sources.get("steps") != "default" and policy.T != cfg.T:
        raise CompatibilityError(f"policy has T={policy.T} but the config asks for T={cfg.T}")
    if LatentShape(*policy.latent_shape).n != cfg.n:
        raise CompatibilityError(
            f"policy latent shape {list(policy.latent_shape)} does not match config shape {cfg.shape.as_list()}"
        )
    cfg.T = policy.T
    return policy


def cmd_run(cfg: RunConfig, args) -> int:
    if args.policy is None:
        raise ConfigError("run needs --policy")
    try:
        policy = _load_run_policy(cfg, args.policy)
    except FileNotFoundError:
        raise ConfigError(f"policy not found: {args.policy}") from None
    mode = cfg.rectify_mode if policy.cached_steps else "off"
    if mode != "off" and not policy.rectification:
        raise CompatibilityError(f"policy {args.policy} carries no rectification parameters; use --rectify-mode off")
    X = np.stack([sample_noise(s, cfg.shape) for s in cfg.seeds])
    reference = reference_endpoints([cfg.field] * len(X), X, cfg.t_ref_steps)
    fld = cfg.field

    def job(x):
        c_full, c_cached = EvalCounter(), EvalCounter()
        full = full_sample(fld, x, cfg.T, counter=c_full, record=False)
        cached = cached_sample(fld, x, policy, mode, counter=c_cached, record=False)
        return full, cached

    results = run_batch(job, list(X), cfg.workers)
    metrics_dir = cfg.out / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed, ref, (full, cached) in zip(cfg.seeds, reference, results):
        rep = endpoint_metrics(cached.endpoint, ref, full.endpoint, T=cfg.T, n_cached=policy.n_cached,
                               evals_full=full.evals, evals_cached=cached.evals,
                               time_full=full.wall_time, time_cached=cached.wall_time)
        doc = {"config": cfg.name, "T": cfg.T, "seed": seed, "rectify_mode": mode,
               "cached_steps": list(policy.cached_steps), "metrics": rep.to_dict()}
        entry = {"cached": doc}
        rows.append([cfg.name, cfg.T, seed, "cached", mode, policy.n_cached, cached.evals,
                     cfg.T / cached.evals, rep.mse_vs_reference, rep.psnr_vs_reference, rep.mse_vs_full,
                     cached.wall_time])
        if args.baseline:
            base = endpoint_metrics(full.endpoint, ref, full.endpoint, T=cfg.T, n_cached=0,
                                    evals_full=full.evals, evals_cached=full.evals,
                                    time_full=full.wall_time, time_cached=full.wall_time)
            entry["baseline"] = {"config": cfg.name, "T": cfg.T, "seed": seed, "metrics": base.to_dict()}
            rows.append([cfg.name, cfg.T, seed, "baseline", "off", 0, full.evals, 1.0,
                         base.mse_vs_reference, base.psnr_vs_reference, base.mse_vs_full, full.wall_time])
        (metrics_dir / f"{cfg.name}_T{cfg.T}_seed{seed}.json").write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n")

    csv_path = cfg.out / "metrics.csv"
    new = not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRICS_COLUMNS)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    if not args.quiet:
        for row in rows:
            print(f"seed {row[2]:>6} {row[3]:<8} evals={row[6]:<4} mse_vs_ref={row[8]:.6g} mse_vs_full={row[10]:.6g}")
        print(f"metrics -> {csv_path}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    grid = []
    for lam in cfg.lambdas:
        if lam in grid:
            log.warning("duplicate lambda %r dropped from the sweep grid", lam)
        else:
            grid.append(lam)
    if len(grid) < 2:
        raise ConfigError(f"sweep needs at least 2 distinct lambda values, got {grid}")
    if any(not lam >= 0 for lam in grid):
        raise ConfigError(f"lambda values must be >= 0, got {grid}")
    grid.sort()
    profile = _calibration_profile(cfg)
    X = np.stack([sample_noise(s, cfg.shape) for s in cfg.seeds])
    rows = sweep_lambda(profile, grid, [cfg.field] * len(X), X, cfg.t_ref_steps, cfg.adjust_timesteps,
                        cfg.rectify_mode, cfg.aggregation, cfg.quantile, cfg.workers)
    path = cfg.out / f"{cfg.name}.pareto.csv"
    _write_csv(path, PARETO_COLUMNS, [[r.threshold, r.n_cached, r.eval_ratio, r.mse_vs_full,
                                       r.mse_vs_reference, r.wall_speedup] for r in rows])
    if not args.quiet:
        for r in rows:
            print(f"lambda={r.threshold:<8g} cached={r.n_cached:<3} ratio={r.eval_ratio:.3f} "
                  f"mse_vs_full={r.mse_vs_full:.4g} mse_vs_ref={r.mse_vs_reference:.4g}")
        print(f"pareto  -> {path}")
    return EXIT_OK


def _random_runs_set(rng, T, max_run=5):
    """Random interior cached set whose consecutive runs are at most ``max_run`` long."""
    S = []
    i = T - 2
    while i >= 1:
        if rng.random() < 0.5:
            length = int(rng.integers(1, max_run + 1))
            S.extend(range(i, max(i - length, 0), -1))
            i -= length + 1
        else:
            i -= 1
    return S


def run_property_suite(cfg: RunConfig, seed: int = 0) -> list[tuple[str, float, float]]:
    """Executable invariant checks; returns ``(name, measured, tolerance)`` triples."""
    rng = np.random.default_rng(seed)
    results = []

    fld = cfg.field if isinstance(cfg.field, GaussianMixtureField) else GaussianMixtureField.random(16, seed=0)
    worst = 0.0
    for k in range(100):
        S = _random_runs_set(rng, 50)
        policy = CachePolicy.uniform(50, S)
        x = sample_noise(10_000 + k, fld.dim)
        worst = max(worst, verify_decomposition(cached_sample(fld, x, policy), full_sample(fld, x, 50)))
    results.append(("decomposition identity max residual", worst, 1e-9))

    worst = 0.0
    for _ in range(1000):
        T = int(rng.choice([4, 50, 100]))
        S = [i for i in range(1, T) if rng.random() < 0.5]
        sched = build_schedule(T, S, {i: float(rng.random()) for i in S})
        worst = max(worst, abs(math.fsum(sched.delta_t) - 1.0))
    results.append(("budget |sum dt - 1|", worst, 1e-12))

    worst = 0.0
    for _ in range(50):
        v = rng.standard_normal((4, 32)) * rng.uniform(0.1, 3.0)
        eps = rng.uniform(-0.5, 0.5) * v + rng.normal(0, 0.3, v.shape) + rng.uniform(-1, 1)
        p = fit_kb(v, eps)
        K, B = fit_kb_oracle_ls(v, eps)
        gap = max(abs(p.K - K) / max(abs(K), 1e-6), abs(p.B - B) / max(abs(B), 1e-6))
        worst = max(worst, gap)
    results.append(("closed-form vs least-squares (K,B) max relative gap", worst, 1e-8))

    ident = AffinePlusIdentityField(rng.standard_normal(8))
    worst = 0.0
    for k in range(20):
        S = _random_runs_set(rng, 50)
        x = sample_noise(20_000 + k, 8)
        a = cached_sample(ident, x, CachePolicy.uniform(50, S)).endpoint
        b = full_sample(ident, x, 50).endpoint
        worst = max(worst, float(np.max(np.abs(a - b))))
    results.append(("zero-shift field cached vs full max gap", worst, 1e-12))
    return results


def cmd_verify(cfg: RunConfig, args) -> int:
    results = run_property_suite(cfg)
    failed = []
    for name, value, tol in results:
        ok = value <= tol
        if not ok:
            failed.append(name)
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {value:.3e} (tolerance {tol:.0e})")
    if failed:
        print(f"{len(failed)} propert{'y' if len(failed) == 1 else 'ies'} failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


SUMMARY_METRICS = ["evals", "eval_ratio", "mse_vs_reference", "psnr_vs_reference", "mse_vs_full", "wall_time"]


def _num(s):
    if s in ("", None):
        return math.nan
    return float(s)


def summarize_runs(directory) -> list[dict]:
    """Mean and standard deviation over seeds, grouped by ``(T, config, mode, rectify_mode)``."""
    directory = Path(directory)
    files = sorted(directory.rglob("metrics.csv")) if directory.is_dir() else []
    groups = defaultdict(list)
    for path in files:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (int(row["T"]), row["config"], row["mode"], row["rectify_mode"])
                groups[key].append(row)
    if not groups:
        raise EmptyInputError(f"no run metrics found under {directory}")
    out = []
    for key in sorted(groups):
        rows = groups[key]
        T, name, mode, rect = key
        entry = {"T": T, "config": name, "mode": mode, "rectify_mode": rect, "n_runs": len(rows)}
        for m in SUMMARY_METRICS:
            vals = [_num(r[m]) for r in rows]
            entry[f"{m}_mean"] = statistics.fmean(vals)
            entry[f"{m}_std"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out.append(entry)
    return out


def cmd_report(args) -> int:
    directory = Path(args.dir)
    summary = summarize_runs(directory)
    header = list(summary[0])
    out = Path(args.out) if args.out else directory
    out.mkdir(parents=True, exist_ok=True)
    path = out / "summary.csv"
    _write_csv(path, header, [[e[h] for h in header] for e in summary])
    print(f"{'T':>4}  {'config':<16} {'mode':<9} {'rectify':<10} {'n':>3}  "
          f"{'evals':>14}  {'mse_vs_reference':>24}  {'mse_vs_full':>24}")
    for e in summary:
        print(f"{e['T']:>4}  {e['config']:<16} {e['mode']:<9} {e['rectify_mode']:<10} {e['n_runs']:>3}  "
              f"{e['evals_mean']:>6.1f} ± {e['evals_std']:<5.2f}  "
              f"{e['mse_vs_reference_mean']:>11.4e} ± {e['mse_vs_reference_std']:<10.3e}  "
              f"{e['mse_vs_full_mean']:>11.4e} ± {e['mse_vs_full_std']:<10.3e}")
    if not args.quiet:
        print(f"summary -> {path}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def _global_options(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=d, help="JSON run configuration")
    parser.add_argument("--out", metavar="DIR", default=d, help="output directory (default: $ERTA_OUT_DIR or ./erta_out)")
    parser.add_argument("--workers", type=int, metavar="N", default=d, help="worker threads for per-seed runs")
    parser.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="only print results and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ertacache", description="Residual-cache calibration and sampling harness.")
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[common], help="profile residuals and write a cache policy")
    p.add_argument("--lambda", dest="lam", type=float, help="relative l1 reuse threshold")
    p.add_argument("--steps", type=int, help="number of Euler steps T")
    p.add_argument("--no-adjust", dest="adjust", action="store_false", default=None,
                   help="keep uniform step sizes")

    p = sub.add_parser("run", parents=[common], help="sample with a policy and write metrics")
    p.add_argument("--policy", metavar="PATH", help="policy file written by calibrate")
    p.add_argument("--rectify-mode", choices=RECTIFY_MODES)
    p.add_argument("--seeds", help="comma-separated evaluation seeds")
    p.add_argument("--steps", type=int)
    p.add_argument("--baseline", action="store_true", help="also record full-compute metrics")

    p = sub.add_parser("sweep", parents=[common], help="calibrate over a threshold grid, write a Pareto CSV")
    p.add_argument("--lambdas", help="comma-separated threshold grid")
    p.add_argument("--steps", type=int)
    p.add_argument("--seeds", help="comma-separated evaluation seeds")
    p.add_argument("--rectify-mode", choices=RECTIFY_MODES)

    sub.add_parser("verify", parents=[common], help="run the invariant checks")

    p = sub.add_parser("report", parents=[common], help="aggregate run metrics in a directory")
    p.add_argument("dir", help="directory holding metrics.csv files (searched recursively)")
    return parser


def _overrides(args) -> dict:
    o = {"out": args.out, "workers": args.workers}
    o["lambda"] = getattr(args, "lam", None)
    o["lambdas"] = getattr(args, "lambdas", None)
    o["steps"] = getattr(args, "steps", None)
    o["seeds"] = getattr(args, "seeds", None)
    o["rectify_mode"] = getattr(args, "rectify_mode", None)
    o["adjust_timesteps"] = getattr(args, "adjust", None)
    return o


SHOWN = {
    "calibrate": ["field", "shape", "steps", "calibration_prompts", "lambda", "aggregation",
                  "adjust_timesteps", "out"],
    "run": ["field", "shape", "steps", "seeds", "rectify_mode", "t_ref_steps", "workers", "eval_delay", "out"],
    "sweep": ["field", "shape", "steps", "calibration_prompts", "seeds", "lambdas", "aggregation",
              "adjust_timesteps", "rectify_mode", "t_ref_steps", "workers", "out"],
    "verify": ["field", "steps"],
}
COMMANDS = {"calibrate": cmd_calibrate, "run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = resolve_config(args, _overrides(args))
        if not args.quiet:
            print(f"ertacache {args.command}: settings (flags > config > defaults)", file=sys.stderr)
            print_settings(cfg, SHOWN[args.command])
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except EmptyInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (PolicyError, CalibrationError, FieldError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
