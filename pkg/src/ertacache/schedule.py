"""Trajectory-aware timestep adjustment.

A cached step ``i`` gets a shrunk interval ``dt_c * phi_i`` where
``phi_i = clip(1 - |v~_i - v_i|_1 / |v_i - v_{i+1}|_1, 0, 1)``; the budget
shaved off is spread evenly over the steps that follow so the intervals still
sum to one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping

import numpy as np

__all__ = [
    "PhiEntry",
    "StepSchedule",
    "compute_phi",
    "build_schedule",
    "uniform_schedule",
    "evenly_spaced_steps",
    "write_schedule_csv",
]

TINY = 1e-30


@dataclass(frozen=True)
class PhiEntry:
    phi: float
    numerator: float
    denominator: float


@dataclass(frozen=True, eq=False)
class StepSchedule:
    """Intervals ``delta_t[p]`` for integration position ``p``, i.e. step ``i = T - 1 - p``."""

    delta_t: np.ndarray

    def __post_init__(self):
        dt = np.asarray(self.delta_t, dtype=float)
        if dt.ndim != 1 or dt.size == 0:
            raise ValueError("schedule needs a non-empty 1-D array of intervals")
        if np.any(dt < 0) or not np.all(np.isfinite(dt)):
            raise ValueError("schedule intervals must be finite and >= 0")
        object.__setattr__(self, "delta_t", dt)

    @property
    def T(self) -> int:
        return self.delta_t.size

    def dt(self, step: int) -> float:
        return float(self.delta_t[self.T - 1 - step])

    def taus(self) -> np.ndarray:
        """Progress at the start of each position: cumulative budget already consumed."""
        return np.concatenate(([0.0], np.cumsum(self.delta_t)[:-1]))

    def by_step(self) -> np.ndarray:
        """Intervals indexed by step number (``out[i] == dt(i)``)."""
        return self.delta_t[::-1].copy()

    @classmethod
    def from_steps(cls, by_step) -> "StepSchedule":
        return cls(np.asarray(by_step, dtype=float)[::-1].copy())

    def __eq__(self, other):
        return isinstance(other, StepSchedule) and np.array_equal(self.delta_t, other.delta_t)


def uniform_schedule(T: int) -> StepSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    return StepSchedule(np.full(T, 1.0 / T))


def compute_phi(v_tilde, v, v_next) -> PhiEntry:
    """Correction coefficient of one cached step.

    A vanishing denominator with a non-vanishing numerator shrinks the step
    fully (``phi = 0``); if both vanish the step is left alone (``phi = 1``).
    """
    v_tilde = np.asarray(v_tilde, dtype=float)
    v = np.asarray(v, dtype=float)
    v_next = np.asarray(v_next, dtype=float)
    if not (v_tilde.shape == v.shape == v_next.shape):
        raise ValueError(f"shape mismatch: {v_tilde.shape}, {v.shape}, {v_next.shape}")
    num = float(np.abs(v_tilde - v).sum())
    den = float(np.abs(v - v_next).sum())
    if den < TINY:
        phi = 1.0 if num < TINY else 0.0
    else:
        phi = min(max(1.0 - num / den, 0.0), 1.0)
    return PhiEntry(phi, num, den)


def build_schedule(T: int, cached_steps, phi: Mapping[int, float]) -> StepSchedule:
    """Renormalised schedule for cached-step set ``cached_steps``.

    Walks ``i = T-1 .. 0`` with a running quantum ``dt_c`` (initially ``1/T``);
    cached steps take ``dt_c * phi[i]``, others ``dt_c``, and after every step
    ``dt_c`` becomes remaining budget / remaining step count.
    """
    S = {int(i) for i in cached_steps}
    if 0 in S:
        raise ValueError("step 0 cannot be cached: no budget left to renormalise after the last step")
    bad = [i for i in S if not 0 < i < T]
    if bad:
        raise ValueError(f"cached steps {sorted(bad)} outside 1..T-1 for T={T}")
    missing = [i for i in S if i not in phi]
    if missing:
        raise ValueError(f"no phi for cached steps {sorted(missing)}")

    dt = np.empty(T)
    dt_c = 1.0 / T
    consumed = 0.0
    # until a step is shrunk the quantum is exactly 1/T; skip the rounding of re-deriving it
    shrunk = False
    for p in range(T):
        i = T - 1 - p
        if i in S:
            f = float(phi[i])
            if not 0.0 <= f <= 1.0:
                raise ValueError(f"phi[{i}] = {f} outside [0, 1]")
            dt[p] = dt_c * f
            shrunk = shrunk or f < 1.0
        else:
            dt[p] = dt_c
        consumed += dt[p]
        remaining = T - 1 - p
        if remaining and shrunk:
            dt_c = (1.0 - consumed) / remaining
    return StepSchedule(dt)


def evenly_spaced_steps(T: int, count: int) -> tuple[int, ...]:
    """``count`` interior steps spread evenly over ``T-2 .. 1`` (the naive uniform cache set)."""
    if not 0 <= count <= T - 2:
        raise ValueError(f"count must lie in [0, {T - 2}] for T={T}, got {count}")
    if count == 0:
        return ()
    interior = np.arange(T - 2, 0, -1)
    idx = np.round(np.linspace(0, interior.size - 1, count)).astype(int)
    return tuple(int(i) for i in interior[idx])


def write_schedule_csv(path, schedule: StepSchedule, phi=None, cached_steps=()):
    """Dump ``step, dt, phi, cached`` rows in integration order."""
    S = set(cached_steps)
    phi = phi or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "dt", "phi", "cached"])
        for p, d in enumerate(schedule.delta_t):
            i = schedule.T - 1 - p
            w.writerow([i, repr(float(d)), repr(float(phi.get(i, 1.0))), int(i in S)])
