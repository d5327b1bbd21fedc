"""Error accounting for cached sampling runs.

``delta_i`` is the cached run's state minus the full run's state at step
``i`` (same start, same schedule). Within a run of consecutive cached steps
the Euler update gives the recursion

    delta_{k-1} = delta_k + dt_k * eps_k,   eps_k = v_used_k - v_full_k

so the deviation gathered over the run equals the sum of interval-weighted
feature shifts. :func:`verify_decomposition` checks exactly that.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .field import EvalCounter, VelocityField, eval_velocity
from .sampler import TrajectoryRecord

__all__ = [
    "ScheduleMismatchError",
    "ErrorLedger",
    "RunCheck",
    "MetricsReport",
    "feature_shift",
    "cached_runs",
    "trajectory_deviation",
    "decomposition_checks",
    "verify_decomposition",
    "local_feature_shift",
    "mse",
    "psnr",
    "endpoint_metrics",
]


class ScheduleMismatchError(ValueError):
    """Deviation is only defined between runs sharing start state and schedule."""


def feature_shift(v_tilde, v) -> np.ndarray:
    v_tilde = np.asarray(v_tilde, dtype=float)
    v = np.asarray(v, dtype=float)
    if v_tilde.shape != v.shape:
        raise ValueError(f"shape mismatch: {v_tilde.shape} vs {v.shape}")
    return v_tilde - v


def cached_runs(record: TrajectoryRecord) -> list[tuple[int, int]]:
    """Maximal runs of consecutive cached steps as ``(first_step, last_step)``, first >= last."""
    runs = []
    p = 0
    while p < record.T:
        if not record.cached[p]:
            p += 1
            continue
        q = p
        while q + 1 < record.T and record.cached[q + 1]:
            q += 1
        runs.append((int(record.steps[p]), int(record.steps[q])))
        p = q + 1
    return runs


@dataclass(eq=False)
class ErrorLedger:
    """``delta[p]`` is the deviation at the start of position ``p``; ``delta[T]`` at the endpoint."""

    steps: np.ndarray
    dt: np.ndarray
    delta: np.ndarray
    eps: dict
    runs: list

    def delta_at(self, step: int) -> np.ndarray:
        """Deviation of state ``x_step``; ``step == -1`` is the endpoint."""
        return self.delta[self.steps.size - 1 - step]


def _check_pair(cached: TrajectoryRecord, full: TrajectoryRecord):
    if cached.states is None or full.states is None:
        raise ValueError("deviation analysis needs recorded (non-lean) trajectories")
    if cached.T != full.T:
        raise ScheduleMismatchError(f"step counts differ: {cached.T} vs {full.T}")
    if not np.array_equal(cached.dt, full.dt):
        raise ScheduleMismatchError("runs use different step schedules")
    if not np.array_equal(cached.states[0], full.states[0]):
        raise ScheduleMismatchError("runs start from different states")


def trajectory_deviation(cached: TrajectoryRecord, full: TrajectoryRecord) -> ErrorLedger:
    _check_pair(cached, full)
    delta = np.concatenate([cached.states - full.states, (cached.endpoint - full.endpoint)[None]])
    eps = {int(cached.steps[p]): cached.velocities[p] - full.velocities[p]
           for p in range(cached.T) if cached.cached[p]}
    return ErrorLedger(cached.steps.copy(), cached.dt.copy(), delta, eps, cached_runs(cached))


@dataclass(frozen=True)
class RunCheck:
    first_step: int
    last_step: int
    length: int
    accumulated: float  # |delta_after - delta_before|_inf
    residual: float  # |delta_after - delta_before - sum dt*eps|_inf / (1 + |delta_after|_inf)


def decomposition_checks(cached: TrajectoryRecord, full: TrajectoryRecord) -> list[RunCheck]:
    ledger = trajectory_deviation(cached, full)
    T = cached.T
    out = []
    for first, last in ledger.runs:
        p0, p1 = T - 1 - first, T - 1 - last
        before = ledger.delta[p0]
        after = ledger.delta[p1 + 1]
        predicted = np.zeros_like(before)
        for p in range(p0, p1 + 1):
            predicted = predicted + ledger.dt[p] * ledger.eps[int(ledger.steps[p])]
        gained = after - before
        resid = float(np.max(np.abs(gained - predicted))) / (1.0 + float(np.max(np.abs(after))))
        out.append(RunCheck(first, last, p1 - p0 + 1, float(np.max(np.abs(gained))), resid))
    return out


def verify_decomposition(cached: TrajectoryRecord, full: TrajectoryRecord) -> float:
    """Largest relative residual of the accumulation identity over all cached runs (0 if none)."""
    checks = decomposition_checks(cached, full)
    return max((c.residual for c in checks), default=0.0)


def local_feature_shift(cached: TrajectoryRecord, field: VelocityField,
                        counter: EvalCounter | None = None) -> dict:
    """``v_used - v(x~)`` at every cached step, with the true field evaluated at the cached run's own state.

    Costs one extra evaluation per cached step (counted on ``counter``).
    """
    counter = counter if counter is not None else EvalCounter()
    out = {}
    for p in range(cached.T):
        if cached.cached[p]:
            i = int(cached.steps[p])
            v = eval_velocity(field, cached.states[p], float(cached.taus[p]), counter, step=i)
            out[i] = cached.velocities[p] - v
    return out


def mse(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(estimate, reference) -> float:
    """``10 log10(peak^2 / MSE)`` with ``peak = max(reference) - min(reference)``.

    Identical inputs give ``inf``; a constant reference (zero peak) gives NaN.
    """
    err = mse(estimate, reference)
    if err == 0.0:
        return math.inf
    reference = np.asarray(reference, dtype=float)
    peak = float(reference.max() - reference.min())
    if peak == 0.0:
        return math.nan
    return 10.0 * math.log10(peak * peak / err)


@dataclass
class MetricsReport:
    mse_vs_reference: float
    psnr_vs_reference: float
    mse_vs_full: float | None = None
    psnr_vs_full: float | None = None
    mean_rel_l1: float | None = None
    evals_full: int | None = None
    evals_cached: int | None = None
    eval_ratio: float | None = None
    time_full: float | None = None
    time_cached: float | None = None
    speedup: float | None = None

    def to_dict(self) -> dict:
        """JSON-safe mapping; infinities become the string ``"inf"`` and NaN becomes ``None``."""
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, float) and math.isinf(v):
                v = "inf" if v > 0 else "-inf"
            elif isinstance(v, float) and math.isnan(v):
                v = None
            out[k] = v
        return out


def endpoint_metrics(cached_endpoint, reference, full_endpoint=None, T: int | None = None,
                     n_cached: int | None = None, evals_full: int | None = None,
                     evals_cached: int | None = None, time_full: float | None = None,
                     time_cached: float | None = None, mean_rel_l1: float | None = None) -> MetricsReport:
    report = MetricsReport(
        mse_vs_reference=mse(cached_endpoint, reference),
        psnr_vs_reference=psnr(cached_endpoint, reference),
        mean_rel_l1=mean_rel_l1,
        evals_full=evals_full,
        evals_cached=evals_cached,
        time_full=time_full,
        time_cached=time_cached,
    )
    if full_endpoint is not None:
        report.mse_vs_full = mse(cached_endpoint, full_endpoint)
        report.psnr_vs_full = psnr(cached_endpoint, full_endpoint)
    if T is not None and n_cached is not None:
        report.eval_ratio = T / (T - n_cached)
    elif evals_full and evals_cached:
        report.eval_ratio = evals_full / evals_cached
    if time_full is not None and time_cached:
        report.speedup = time_full / time_cached
    return report
