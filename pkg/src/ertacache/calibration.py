"""Offline policy calibration by residual error profiling.

Pass one runs cache-free sampling over a batch of calibration prompts and
logs the ground-truth residual ``r_gt = v - x`` at every step. Pass two
replays the batch in lockstep with full compute *and* a residual cache: at an
interior step the cache is reused when the aggregated relative l1 gap between
the cached residual and the fresh one, normalised by ``|r_gt|_1`` of the same
step number from pass one, is strictly below the threshold. Reused steps
advance with the cache reconstruction, so later decisions see the drift they
would see at inference. Every reused step leaves behind
``(v_tilde, v, v_next)`` samples for timestep adjustment and rectification.

A "prompt" is a ``(field, seed)`` pair; the seed fixes the start noise.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Sequence

import numpy as np

from .field import EvalCounter, FieldError, LatentShape, VelocityField, eval_velocity, field_hash, reference_endpoint, sample_noise
from .policy_store import CachePolicy, dumps_canonical
from .rectify import RectParams, fit_kb
from .sampler import cached_sample, full_sample, run_batch
from .schedule import build_schedule, compute_phi, uniform_schedule

__all__ = [
    "CalibrationError",
    "CalibrationProfile",
    "CalibrationArtifacts",
    "StepSamples",
    "SweepRow",
    "AGGREGATIONS",
    "make_prompts",
    "log_ground_truth",
    "relative_l1",
    "search_policy",
    "collect_samples",
    "aggregate_phi",
    "fit_rectification",
    "build_policy",
    "calibrate",
    "threshold_for_count",
    "sweep_lambda",
    "reference_endpoints",
    "save_profile",
    "load_profile",
    "write_residuals_bin",
    "read_residuals_bin",
    "creation_timestamp",
]

logger = logging.getLogger(__name__)

AGGREGATIONS = ("mean", "max", "quantile")
TINY = 1e-30
PROFILE_VERSION = 1
_BIN_HEADER = struct.Struct("<4sIII")


class CalibrationError(RuntimeError):
    pass


@dataclass(eq=False)
class CalibrationProfile:
    """Pass-one output. Arrays are in integration order: index ``p`` is step ``T-1-p``."""

    T: int
    fields: list
    seeds: list
    x_start: np.ndarray  # (P, n)
    states: np.ndarray  # (P, T, n)
    velocities: np.ndarray  # (P, T, n)
    endpoints: np.ndarray  # (P, n)

    @property
    def n_prompts(self) -> int:
        return self.x_start.shape[0]

    @property
    def residuals(self) -> np.ndarray:
        return self.velocities - self.states

    def r_gt(self, step: int) -> np.ndarray:
        """Ground-truth residuals of every prompt at ``step``, shape ``(P, n)``."""
        return self.velocities[:, self.T - 1 - step] - self.states[:, self.T - 1 - step]

    def subset(self, count: int) -> "CalibrationProfile":
        """The first ``count`` prompts."""
        return CalibrationProfile(self.T, self.fields[:count], self.seeds[:count], self.x_start[:count],
                                  self.states[:count], self.velocities[:count], self.endpoints[:count])


@dataclass(eq=False)
class StepSamples:
    """Calibration samples of one cached step, one row per prompt."""

    v_tilde: np.ndarray
    v: np.ndarray
    v_next: np.ndarray

    @property
    def eps(self) -> np.ndarray:
        return self.v_tilde - self.v


@dataclass(eq=False)
class CalibrationArtifacts:
    T: int
    threshold: float
    aggregation: str
    cached_steps: tuple[int, ...]
    rel_l1: np.ndarray  # (P, T), NaN where no test was made
    rel_l1_agg: np.ndarray  # (T,)
    samples: dict  # step -> StepSamples
    endpoints: np.ndarray  # (P, n) of the calibration-cached trajectories
    evals: int = 0

    @property
    def n_cached(self) -> int:
        return len(self.cached_steps)


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    n_cached: int
    eval_count: int
    eval_ratio: float
    mse_vs_full: float
    mse_vs_reference: float
    wall_speedup: float


def creation_timestamp() -> str:
    """UTC ISO timestamp; honours ``SOURCE_DATE_EPOCH`` for reproducible outputs."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
            else _dt.datetime.now(_dt.timezone.utc))
    return when.replace(microsecond=0).isoformat()


def make_prompts(field: VelocityField, seeds: Sequence[int]) -> list[tuple[VelocityField, int]]:
    return [(field, int(s)) for s in seeds]


def _eval_batch(fields, X, tau, step, counter):
    first = fields[0]
    if all(f is first for f in fields):
        return eval_velocity(first, X, tau, counter, step=step)
    return np.stack([eval_velocity(f, x, tau, counter, step=step) for f, x in zip(fields, X)])


def log_ground_truth(prompts, T: int, shape=None, counter: EvalCounter | None = None,
                     x_start=None) -> CalibrationProfile:
    """Pass one: cache-free uniform-step sampling of every prompt, ``T`` evaluations each.

    ``x_start`` overrides the seeded start noise (one row per prompt).
    """
    if T < 2:
        raise ValueError(f"calibration needs T >= 2, got {T}")
    prompts = list(prompts)
    if not prompts:
        raise ValueError("calibration needs at least one prompt")
    fields = [f for f, _ in prompts]
    seeds = [s for _, s in prompts]
    if x_start is None:
        dims = {f.dim for f in fields}
        if len(dims) != 1:
            raise ValueError(f"prompts mix field dimensions {sorted(dims)}")
        shape = LatentShape.coerce(shape if shape is not None else dims.pop())
        X = np.stack([sample_noise(s, shape) for s in seeds])
    else:
        X = np.array(x_start, dtype=float).reshape(len(prompts), -1)
    P, n = X.shape
    counter = counter if counter is not None else EvalCounter()
    dt = 1.0 / T
    taus = uniform_schedule(T).taus()
    states = np.empty((P, T, n))
    vels = np.empty((P, T, n))
    for p in range(T):
        i = T - 1 - p
        try:
            V = _eval_batch(fields, X, taus[p], i, counter)
        except FieldError as exc:
            raise CalibrationError(f"ground-truth pass, step {i}: {exc}") from exc
        states[:, p] = X
        vels[:, p] = V
        X = X + dt * V
    return CalibrationProfile(T, fields, seeds, states[:, 0].copy(), states, vels, X)


def relative_l1(r_tilde, r, r_gt) -> float:
    """``|r_tilde - r|_1 / |r_gt|_1``."""
    den = float(np.abs(np.asarray(r_gt, dtype=float)).sum())
    if den < TINY:
        raise CalibrationError("degenerate ground-truth residual: |r_gt|_1 is zero")
    return float(np.abs(np.asarray(r_tilde, dtype=float) - np.asarray(r, dtype=float)).sum()) / den


def _aggregate(rel, aggregation, quantile):
    if aggregation == "mean":
        return float(np.mean(rel))
    if aggregation == "max":
        return float(np.max(rel))
    if aggregation == "quantile":
        return float(np.quantile(rel, quantile))
    raise ValueError(f"unknown aggregation {aggregation!r}; expected one of {AGGREGATIONS}")


def _pass_two(profile, decide, counter):
    T = profile.T
    P, n = profile.x_start.shape
    dt = 1.0 / T
    taus = uniform_schedule(T).taus()
    X = profile.x_start.copy()
    cache_r = None
    V_prev = None
    rel_l1 = np.full((P, T), np.nan)
    rel_agg = np.full(T, np.nan)
    samples = {}
    S = []
    for p in range(T):
        i = T - 1 - p
        try:
            V = _eval_batch(profile.fields, X, taus[p], i, counter)
        except FieldError as exc:
            raise CalibrationError(f"policy search, step {i}: {exc}") from exc
        R = V - X
        if i == T - 1 or i == 0:
            cache_r = R
            X_next = X + dt * V
        else:
            den = np.abs(profile.velocities[:, p] - profile.states[:, p]).sum(axis=1)
            bad = np.flatnonzero(den < TINY)
            if bad.size:
                raise CalibrationError(
                    f"degenerate ground-truth residual: |r_gt|_1 = 0 for prompt "
                    f"{profile.seeds[bad[0]]} at step {i}"
                )
            rel = np.abs(cache_r - R).sum(axis=1) / den
            rel_l1[:, p] = rel
            agg = decide.aggregate(rel)
            rel_agg[p] = agg
            if decide(i, agg):
                S.append(i)
                Vt = X + cache_r
                samples[i] = StepSamples(Vt, V, V_prev)
                X_next = X + dt * Vt
            else:
                cache_r = R
                X_next = X + dt * V
        V_prev = V
        X = X_next
    return tuple(S), rel_l1, rel_agg, samples, X


class _ThresholdRule:
    def __init__(self, threshold, aggregation, quantile):
        self.threshold = threshold
        self.aggregation = aggregation
        self.quantile = quantile

    def aggregate(self, rel):
        return _aggregate(rel, self.aggregation, self.quantile)

    def __call__(self, step, agg):
        return agg < self.threshold


class _FixedSet(_ThresholdRule):
    def __init__(self, steps, aggregation, quantile):
        super().__init__(math.nan, aggregation, quantile)
        self.steps = set(steps)

    def __call__(self, step, agg):
        return step in self.steps


def search_policy(profile: CalibrationProfile, threshold: float, aggregation: str = "mean",
                  quantile: float = 0.5, counter: EvalCounter | None = None) -> CalibrationArtifacts:
    """Pass two: threshold search over the calibration batch.

    A step joins the cached set when the batch-aggregated relative l1 error
    (``mean``, ``max`` or ``quantile``) is strictly below ``threshold``. Steps
    ``T-1`` and ``0`` are always computed.
    """
    if not threshold >= 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}; expected one of {AGGREGATIONS}")
    counter = counter if counter is not None else EvalCounter()
    start = counter.count
    rule = _ThresholdRule(threshold, aggregation, quantile)
    S, rel, agg, samples, end = _pass_two(profile, rule, counter)
    return CalibrationArtifacts(profile.T, float(threshold), aggregation, S, rel, agg, samples, end,
                                counter.count - start)


def collect_samples(profile: CalibrationProfile, cached_steps, counter: EvalCounter | None = None,
                    aggregation: str = "mean", quantile: float = 0.5) -> CalibrationArtifacts:
    """Pass two with a fixed cached set instead of a threshold decision."""
    S = set(int(i) for i in cached_steps)
    if 0 in S or profile.T - 1 in S:
        raise ValueError("boundary steps cannot be cached")
    counter = counter if counter is not None else EvalCounter()
    start = counter.count
    rule = _FixedSet(S, aggregation, quantile)
    steps, rel, agg, samples, end = _pass_two(profile, rule, counter)
    return CalibrationArtifacts(profile.T, math.nan, aggregation, steps, rel, agg, samples, end,
                                counter.count - start)


def aggregate_phi(artifacts: CalibrationArtifacts, how: str = "mean") -> dict[int, float]:
    """Per-step correction coefficient, combined over prompts."""
    out = {}
    for i, s in artifacts.samples.items():
        phis = np.array([compute_phi(vt, v, vn).phi for vt, v, vn in zip(s.v_tilde, s.v, s.v_next)])
        if how == "mean":
            out[i] = float(phis.mean())
        elif how == "median":
            out[i] = float(np.median(phis))
        elif how == "min":
            out[i] = float(phis.min())
        else:
            raise ValueError(f"unknown phi aggregation {how!r}")
    return out


def fit_rectification(artifacts: CalibrationArtifacts) -> dict[int, RectParams]:
    """Closed-form ``(K, B)`` per cached step, samples pooled over prompts and elements."""
    return {i: fit_kb(s.v_tilde, s.eps) for i, s in artifacts.samples.items()}


def build_policy(profile: CalibrationProfile, artifacts: CalibrationArtifacts, adjust_timesteps: bool = True,
                 phi_aggregation: str = "mean", shape=None, created: str | None = None) -> CachePolicy:
    T = profile.T
    phi = aggregate_phi(artifacts, phi_aggregation)
    fits = fit_rectification(artifacts)
    if adjust_timesteps:
        schedule = build_schedule(T, artifacts.cached_steps, phi)
        dt = schedule.by_step()
    else:
        dt = np.full(T, 1.0 / T)
    phi_arr = np.ones(T)
    K = np.zeros(T)
    B = np.zeros(T)
    for i in artifacts.cached_steps:
        phi_arr[i] = phi[i]
        K[i] = fits[i].K
        B[i] = fits[i].B
    hashes = sorted({field_hash(f) for f in profile.fields})
    n = profile.x_start.shape[1]
    shape = LatentShape.coerce(shape if shape is not None else n)
    if shape.n != n:
        raise ValueError(f"latent shape {shape} has n={shape.n}, state dimension is {n}")
    provenance = {
        "field_hash": hashes[0] if len(hashes) == 1 else hashes,
        "prompt_count": profile.n_prompts,
        "seeds": [int(s) for s in profile.seeds],
        "aggregation": artifacts.aggregation,
        "phi_aggregation": phi_aggregation,
        "adjust_timesteps": bool(adjust_timesteps),
        "created": created if created is not None else creation_timestamp(),
    }
    threshold = artifacts.threshold
    if math.isnan(threshold):
        # fixed cached set: record the largest rel-l1 any reused step actually had
        provenance["cached_set"] = "fixed"
        threshold = max((float(artifacts.rel_l1_agg[T - 1 - i]) for i in artifacts.cached_steps), default=0.0)
    return CachePolicy(
        T=T,
        threshold=threshold,
        cached_steps=artifacts.cached_steps,
        dt=dt,
        K=K,
        B=B,
        phi=phi_arr,
        latent_shape=tuple(shape.as_list()),
        rectification=True,
        provenance=provenance,
    ).validate()


def calibrate(prompts, T: int, threshold: float, aggregation: str = "mean", quantile: float = 0.5,
              adjust_timesteps: bool = True, shape=None, created: str | None = None):
    """Both passes plus policy assembly. Returns ``(policy, profile, artifacts)``."""
    profile = log_ground_truth(prompts, T, shape=shape)
    artifacts = search_policy(profile, threshold, aggregation, quantile)
    policy = build_policy(profile, artifacts, adjust_timesteps, shape=shape, created=created)
    return policy, profile, artifacts


def threshold_for_count(profile: CalibrationProfile, target: int, aggregation: str = "mean",
                        quantile: float = 0.5, iters: int = 40) -> tuple[float, int]:
    """Bisect the threshold so the cached-set size lands as close as possible to ``target``.

    Returns ``(threshold, |S|)``; ties resolve to the smaller threshold.
    """
    lo, hi = 0.0, 1.0
    while search_policy(profile, hi, aggregation, quantile).n_cached < target and hi < 1e6:
        hi *= 2.0
    best = (abs(search_policy(profile, hi, aggregation, quantile).n_cached - target), hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        k = search_policy(profile, mid, aggregation, quantile).n_cached
        cand = (abs(k - target), mid)
        if cand < best:
            best = cand
        if k < target:
            lo = mid
        else:
            hi = mid
    lam = best[1]
    return lam, search_policy(profile, lam, aggregation, quantile).n_cached


def reference_endpoints(fields, X, t_ref_steps: int) -> np.ndarray:
    """Fine-grid reference endpoints, batched when every prompt shares one field."""
    X = np.asarray(X, dtype=float)
    if all(f is fields[0] for f in fields):
        return reference_endpoint(fields[0], X, t_ref_steps)
    return np.stack([reference_endpoint(f, x, t_ref_steps) for f, x in zip(fields, X)])


def sweep_lambda(profile: CalibrationProfile, thresholds, eval_fields=None, eval_x=None,
                 t_ref_steps: int = 100_000, adjust_timesteps: bool = True, rectify_mode: str = "linearized",
                 aggregation: str = "mean", quantile: float = 0.5, workers: int = 1,
                 reference=None) -> list[SweepRow]:
    """Calibrate at every threshold and score the resulting policy.

    Policies are evaluated on ``eval_x`` (default: the calibration starts).
    Endpoint errors are mean squared errors averaged over evaluation prompts;
    ``wall_speedup`` is total full-sampling time over total cached time.
    """
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("threshold grid is empty")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("threshold grid must be ascending")
    if eval_x is None:
        eval_x, eval_fields = profile.x_start, profile.fields
    eval_x = np.asarray(eval_x, dtype=float)
    eval_fields = list(eval_fields) if eval_fields is not None else [profile.fields[0]] * len(eval_x)
    T = profile.T
    jobs = list(zip(eval_fields, eval_x))
    fulls = run_batch(lambda job: full_sample(job[0], job[1], T, record=False), jobs, workers)
    if reference is None:
        reference = reference_endpoints(eval_fields, eval_x, t_ref_steps)
    full_end = np.stack([r.endpoint for r in fulls])
    full_time = sum(r.wall_time for r in fulls)
    rows = []
    for lam in thresholds:
        art = search_policy(profile, lam, aggregation, quantile)
        policy = build_policy(profile, art, adjust_timesteps, created="")
        mode = rectify_mode if policy.cached_steps else "off"
        runs = run_batch(lambda job: cached_sample(job[0], job[1], policy, mode, record=False), jobs, workers)
        ends = np.stack([r.endpoint for r in runs])
        cached_time = sum(r.wall_time for r in runs)
        evals = T - policy.n_cached
        rows.append(SweepRow(
            threshold=lam,
            n_cached=policy.n_cached,
            eval_count=evals,
            eval_ratio=T / evals,
            mse_vs_full=float(np.mean((ends - full_end) ** 2)),
            mse_vs_reference=float(np.mean((ends - reference) ** 2)),
            wall_speedup=full_time / cached_time if cached_time > 0 else math.inf,
        ))
    counts = [r.n_cached for r in rows]
    if any(b < a for a, b in zip(counts, counts[1:])):
        logger.warning("cached-set size is not monotone in the threshold: %s", counts)
    return rows


def write_residuals_bin(path, residuals: np.ndarray) -> None:
    """Flat little-endian float64 dump behind a 16-byte header.

    Header: magic ``b"ERTA"``, then uint32 format version, ``T`` and ``n``.
    The payload is ``T * n`` doubles, row ``p`` holding step ``T-1-p``.
    """
    residuals = np.asarray(residuals, dtype="<f8")
    T, n = residuals.shape
    with open(path, "wb") as fh:
        fh.write(_BIN_HEADER.pack(b"ERTA", PROFILE_VERSION, T, n))
        fh.write(np.ascontiguousarray(residuals).tobytes())


def read_residuals_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _BIN_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, T, n = _BIN_HEADER.unpack_from(raw)
    if magic != b"ERTA":
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != PROFILE_VERSION:
        raise ValueError(f"{path}: unsupported residual file version {version}")
    expected = _BIN_HEADER.size + 8 * T * n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", offset=_BIN_HEADER.size).reshape(T, n).astype(float)


def save_profile(profile: CalibrationProfile, directory, full_vectors: bool = False) -> Path:
    """Per-prompt residual-norm CSVs plus ``manifest.json``; optional full residual dumps."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    T = profile.T
    entries = []
    res = profile.residuals
    for k in range(profile.n_prompts):
        stem = f"prompt_{k:04d}"
        with open(directory / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "l1", "l2", "linf"])
            for p in range(T):
                r = res[k, p]
                w.writerow([T - 1 - p, repr(float(np.abs(r).sum())), repr(float(np.linalg.norm(r))),
                            repr(float(np.abs(r).max()))])
        entry = {
            "id": k,
            "seed": int(profile.seeds[k]),
            "field_hash": field_hash(profile.fields[k]),
            "summary_csv": f"{stem}.csv",
            "x_start": profile.x_start[k].tolist(),
        }
        if full_vectors:
            write_residuals_bin(directory / f"{stem}.residuals.bin", res[k])
            entry["residuals_file"] = f"{stem}.residuals.bin"
        entries.append(entry)
    manifest = {
        "format": "ertaprofile",
        "version": PROFILE_VERSION,
        "T": T,
        "n": int(profile.x_start.shape[1]),
        "prompts": entries,
    }
    (directory / "manifest.json").write_text(dumps_canonical(manifest))
    return directory


def load_profile(directory, field: VelocityField) -> CalibrationProfile:
    """Rebuild a profile from its manifest by re-running pass one from the stored starts.

    The residual dumps, when present, are checked against the recomputation.
    """
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != "ertaprofile" or manifest.get("version") != PROFILE_VERSION:
        raise ValueError(f"{directory}: not a version-{PROFILE_VERSION} calibration profile")
    entries = manifest["prompts"]
    for e in entries:
        if e["field_hash"] != field_hash(field):
            raise ValueError(f"{directory}: prompt {e['id']} was profiled on a different field")
    X = np.array([e["x_start"] for e in entries])
    profile = log_ground_truth([(field, e["seed"]) for e in entries], manifest["T"], x_start=X)
    for k, e in enumerate(entries):
        if "residuals_file" in e:
            stored = read_residuals_bin(directory / e["residuals_file"])
            if not np.array_equal(stored, profile.residuals[k]):
                raise ValueError(f"{directory}: stored residuals of prompt {e['id']} do not reproduce")
    return profile
