"""Euler samplers over the denoising progress ``tau``.

Steps are numbered ``i = T-1, ..., 0`` in integration order. Step ``i`` starts
from state ``x_i`` at progress ``tau_i`` (the budget consumed by the steps
before it), applies ``x_{i-1} = x_i + dt_i * v`` and the result of step 0 is
the endpoint.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cache import ResidualCache
from .field import EvalCounter, FieldError, VelocityField, eval_velocity
from .policy_store import CachePolicy
from .rectify import rectify_velocity
from .schedule import StepSchedule, uniform_schedule

__all__ = [
    "TrajectoryRecord",
    "euler_step",
    "full_sample",
    "cached_sample",
    "run_batch",
    "write_trajectory_csv",
]


@dataclass(eq=False)
class TrajectoryRecord:
    """Per-step log of one sampling run, in integration order.

    Row ``p`` describes step ``steps[p] == T - 1 - p``: the state it started
    from, the velocity actually used for the update (after rectification),
    the raw cache reconstruction ``v_tilde`` (equal to ``velocities`` on
    computed steps), and its interval. With ``record=False`` the per-step
    ``states``/``velocities``/``v_tilde`` arrays are omitted.
    """

    steps: np.ndarray
    taus: np.ndarray
    dt: np.ndarray
    cached: np.ndarray
    states: np.ndarray | None
    velocities: np.ndarray | None
    v_tilde: np.ndarray | None
    endpoint: np.ndarray
    evals: int
    wall_time: float = 0.0

    @property
    def T(self) -> int:
        return self.steps.size

    @property
    def cached_steps(self) -> tuple[int, ...]:
        return tuple(int(i) for i in self.steps[self.cached])

    def position(self, step: int) -> int:
        return self.T - 1 - step

    def state(self, step: int) -> np.ndarray:
        """``x_step``; ``state(-1)`` is the endpoint."""
        if step == -1:
            return self.endpoint
        return self.states[self.position(step)]

    def replay(self) -> np.ndarray:
        """Re-apply the logged updates; returns states including the endpoint."""
        out = [self.states[0]]
        for p in range(self.T):
            out.append(euler_step(out[-1], self.velocities[p], self.dt[p]))
        return np.array(out)


def euler_step(x, v, dt: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.shape != v.shape:
        raise ValueError(f"state shape {x.shape} and velocity shape {v.shape} differ")
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    return x + dt * v


def _resolve_schedule(schedule) -> StepSchedule:
    if isinstance(schedule, StepSchedule):
        return schedule
    return uniform_schedule(int(schedule))


def _run(field, x_start, schedule, cached_steps, rect, mode, counter, record):
    T = schedule.T
    S = set(cached_steps)
    taus = schedule.taus()
    steps = np.arange(T - 1, -1, -1)
    cached = np.array([i in S for i in steps])
    x = np.array(x_start, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"x_start must be a 1-D state, got shape {x.shape}")
    if record:
        states = np.empty((T, x.size))
        used = np.empty((T, x.size))
        raw = np.empty((T, x.size))
    counter = counter if counter is not None else EvalCounter()
    start_count = counter.count
    cache = ResidualCache()
    t0 = time.perf_counter()
    for p in range(T):
        i = T - 1 - p
        tau = float(min(taus[p], 1.0))
        if i in S:
            v_tilde = cache.reuse(x)
            v = v_tilde if rect is None else rectify_velocity(v_tilde, rect[0][i], rect[1][i], mode)
        else:
            try:
                v = eval_velocity(field, x, tau, counter, step=i)
            except FieldError as exc:
                raise FieldError(f"step {i}: {exc}") from exc
            cache.refresh(v, x, i)
            v_tilde = v
        if record:
            states[p] = x
            used[p] = v
            raw[p] = v_tilde
        x = x + schedule.delta_t[p] * v
    wall = time.perf_counter() - t0
    return TrajectoryRecord(
        steps=steps,
        taus=taus,
        dt=schedule.delta_t.copy(),
        cached=cached,
        states=states if record else None,
        velocities=used if record else None,
        v_tilde=raw if record else None,
        endpoint=x,
        evals=counter.count - start_count,
        wall_time=wall,
    )


def full_sample(field: VelocityField, x_start, schedule: StepSchedule | int,
                counter: EvalCounter | None = None, record: bool = True) -> TrajectoryRecord:
    """Plain Euler integration evaluating the field at every step."""
    return _run(field, x_start, _resolve_schedule(schedule), (), None, "off", counter, record)


def cached_sample(field: VelocityField, x_start, policy: CachePolicy, rectify_mode: str = "off",
                  schedule: StepSchedule | None = None, counter: EvalCounter | None = None,
                  record: bool = True) -> TrajectoryRecord:
    """Euler integration reusing the residual cache at ``policy.cached_steps``.

    At a cached step the velocity is rebuilt from the cache at the current
    state and, unless ``rectify_mode == 'off'``, corrected with that step's
    ``(K, B)``. ``schedule`` overrides the policy's step sizes (used by
    ablations that keep the cached set but drop timestep adjustment).
    """
    policy.validate()
    schedule = policy.schedule if schedule is None else _resolve_schedule(schedule)
    if schedule.T != policy.T:
        raise ValueError(f"schedule has {schedule.T} steps but policy has T={policy.T}")
    if rectify_mode not in ("off", "sigmoid", "linearized"):
        raise ValueError(f"unknown rectify mode {rectify_mode!r}")
    rect = None
    if rectify_mode != "off":
        if policy.cached_steps and not policy.rectification:
            raise ValueError(
                f"rectify mode {rectify_mode!r} requested but the policy carries no K/B "
                f"for cached steps {list(policy.cached_steps)}"
            )
        rect = (policy.K, policy.B)
    return _run(field, x_start, schedule, policy.cached_steps, rect, rectify_mode, counter, record)


def run_batch(fn, items, workers: int = 1) -> list:
    """Apply ``fn`` to every item, in parallel threads, returning results in input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def write_trajectory_csv(path, record: TrajectoryRecord) -> None:
    """One row per step: ``step, tau, dt, cached, norm_x, norm_v``."""
    if record.states is None:
        raise ValueError("lean trajectory record has no per-step states to export")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "tau", "dt", "cached", "norm_x", "norm_v"])
        for p in range(record.T):
            w.writerow([
                int(record.steps[p]),
                repr(float(record.taus[p])),
                repr(float(record.dt[p])),
                int(record.cached[p]),
                repr(float(np.linalg.norm(record.states[p]))),
                repr(float(np.linalg.norm(record.velocities[p]))),
            ])
