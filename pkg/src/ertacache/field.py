"""Velocity-field providers standing in for a trained denoiser.

All fields return the *denoising-direction* velocity as a function of the
denoising progress ``tau`` in [0, 1] (0 = pure noise, 1 = data), so that a
sampler can always advance with ``x <- x + dt * v`` and a positive ``dt``.
For the analytic flow-matching mixture this is the negated forward marginal
velocity evaluated at forward time ``t = 1 - tau``.

States are plain float64 arrays of shape ``(n,)``; fields also accept a batch
of states with shape ``(batch, n)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import threading
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

__all__ = [
    "FieldError",
    "LatentShape",
    "EvalCounter",
    "VelocityField",
    "AffineField",
    "AffinePlusIdentityField",
    "GaussianMixtureField",
    "ScriptedField",
    "eval_velocity",
    "mixture_responsibilities",
    "reference_endpoint",
    "sample_noise",
    "field_from_config",
    "field_hash",
    "load_table_csv",
]


class FieldError(RuntimeError):
    """Raised when a velocity field produces non-finite values or diverges."""


@dataclass(frozen=True)
class LatentShape:
    """Axis counts of a video-style latent: time, channel, height, width."""

    n_t: int = 1
    n_c: int = 1
    n_h: int = 1
    n_w: int = 1

    def __post_init__(self):
        for name in ("n_t", "n_c", "n_h", "n_w"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"LatentShape.{name} must be a positive integer, got {value!r}")

    @property
    def n(self) -> int:
        return self.n_t * self.n_c * self.n_h * self.n_w

    @classmethod
    def from_dim(cls, dim: int) -> "LatentShape":
        return cls(1, 1, 1, int(dim))

    @classmethod
    def coerce(cls, value) -> "LatentShape":
        """Accept a LatentShape, an int dimension, or a 4-sequence."""
        if isinstance(value, LatentShape):
            return value
        if isinstance(value, (int, np.integer)):
            return cls.from_dim(int(value))
        dims = [int(v) for v in value]
        if len(dims) != 4:
            raise ValueError(f"latent shape needs 4 axis counts (t, c, h, w), got {dims}")
        return cls(*dims)

    def as_list(self) -> list[int]:
        return [self.n_t, self.n_c, self.n_h, self.n_w]


class EvalCounter:
    """Thread-safe count of full field evaluations (one per evaluated state)."""

    def __init__(self):
        self._count = 0
        self._lock = threading.Lock()

    @property
    def count(self) -> int:
        return self._count

    def increment(self, k: int = 1) -> None:
        if k < 0:
            raise ValueError("EvalCounter is monotone; cannot decrement")
        with self._lock:
            self._count += k

    def __repr__(self):
        return f"EvalCounter(count={self._count})"


class VelocityField:
    """Base class for velocity providers.

    Subclasses implement :meth:`velocity`, a pure function of the state, the
    denoising progress and (optionally) the integer step index.
    """

    kind: str = "abstract"
    delay: float = 0.0

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def velocity(self, x: np.ndarray, tau: float, step: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def to_config(self) -> dict:
        raise NotImplementedError


def _as_matrix(a, dim, name):
    a = np.asarray(a, dtype=float)
    if a.shape != (dim, dim):
        raise ValueError(f"{name} must have shape ({dim}, {dim}), got {a.shape}")
    return a


def _as_vector(b, dim, name):
    b = np.asarray(b, dtype=float)
    if b.ndim == 0:
        b = np.full(dim, float(b))
    if b.shape != (dim,):
        raise ValueError(f"{name} must have shape ({dim},), got {b.shape}")
    return b


@dataclass(eq=False)
class AffineField(VelocityField):
    """``v(x, tau) = A(tau) x + b(tau)`` with both terms interpolated linearly in tau."""

    A0: np.ndarray
    b0: np.ndarray
    A1: np.ndarray | None = None
    b1: np.ndarray | None = None
    delay: float = 0.0
    kind: str = dc_field(default="affine", init=False)

    def __post_init__(self):
        b0 = np.asarray(self.b0, dtype=float)
        dim = b0.size if b0.ndim else np.asarray(self.A0).shape[0]
        self.A0 = _as_matrix(self.A0, dim, "A0")
        self.b0 = _as_vector(b0, dim, "b0")
        self.A1 = self.A0.copy() if self.A1 is None else _as_matrix(self.A1, dim, "A1")
        self.b1 = self.b0.copy() if self.b1 is None else _as_vector(self.b1, dim, "b1")
        _check_delay(self.delay)

    @property
    def dim(self) -> int:
        return self.b0.size

    def velocity(self, x, tau, step=None):
        A = (1.0 - tau) * self.A0 + tau * self.A1
        b = (1.0 - tau) * self.b0 + tau * self.b1
        return x @ A.T + b

    def to_config(self):
        return {
            "kind": self.kind,
            "A0": self.A0.tolist(),
            "A1": self.A1.tolist(),
            "b0": self.b0.tolist(),
            "b1": self.b1.tolist(),
            "delay": self.delay,
        }


@dataclass(eq=False)
class AffinePlusIdentityField(VelocityField):
    """``v(x) = x + c``.

    The cache residual ``v(x) - x`` equals ``c`` everywhere, so residual reuse
    is exact on this field. With ``c = 0`` it is the exponential-growth field
    ``dx/dtau = x`` whose unit-time solution is ``e * x_start``.
    """

    offset: np.ndarray
    delay: float = 0.0
    kind: str = dc_field(default="affine-plus-identity", init=False)

    def __post_init__(self):
        self.offset = np.atleast_1d(np.asarray(self.offset, dtype=float))
        if self.offset.ndim != 1:
            raise ValueError("offset must be a 1-D vector")
        _check_delay(self.delay)

    @property
    def dim(self) -> int:
        return self.offset.size

    def velocity(self, x, tau, step=None):
        return x + self.offset

    def to_config(self):
        return {"kind": self.kind, "offset": self.offset.tolist(), "delay": self.delay}


@dataclass(eq=False)
class GaussianMixtureField(VelocityField):
    """Exact marginal velocity of the linear flow-matching path for a mixture.

    Data ``x_0 ~ sum_k w_k N(mu_k, sigma_k^2 I)`` and noise ``x_T ~ N(0, I)``
    are joined by ``x_t = (1 - t) x_0 + t x_T``. Given component ``k`` the
    marginal at time ``t`` is ``N(m_k, s_k^2 I)`` with ``m_k = (1 - t) mu_k``
    and ``s_k^2 = (1 - t)^2 sigma_k^2 + t^2``, and the conditional velocity is
    ``(ds_k/dt / s_k) (x - m_k) + dm_k/dt``. Components are blended by their
    posterior responsibilities.
    """

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray
    delay: float = 0.0
    kind: str = dc_field(default="gaussian-mixture", init=False)

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.scales = np.atleast_1d(np.asarray(self.scales, dtype=float))
        k = self.weights.size
        if self.means.shape[0] != k or self.scales.shape != (k,):
            raise ValueError(
                f"mixture needs matching component counts: weights {k}, "
                f"means {self.means.shape[0]}, scales {self.scales.size}"
            )
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(self.scales <= 0):
            raise ValueError("mixture scales must be > 0")
        _check_delay(self.delay)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def _moments(self, t):
        m = (1.0 - t) * self.means  # (K, n)
        s2 = (1.0 - t) ** 2 * self.scales**2 + t**2  # (K,)
        # (ds/dt) / s
        rate = (t - (1.0 - t) * self.scales**2) / s2
        return m, s2, rate

    def responsibilities(self, x, t):
        x = np.asarray(x, dtype=float)
        m, s2, _ = self._moments(t)
        return _responsibilities(x, np.log(self.weights), m, s2)

    def forward_velocity(self, x, t):
        """``E[x_T - x_0 | x_t = x]`` (noise-ward direction)."""
        x = np.asarray(x, dtype=float)
        m, s2, rate = self._moments(t)
        w = _responsibilities(x, np.log(self.weights), m, s2)  # (..., K)
        diff = x[..., None, :] - m  # (..., K, n)
        comp = rate[:, None] * diff - self.means  # (..., K, n)
        return np.einsum("...k,...kn->...n", w, comp)

    def velocity(self, x, tau, step=None):
        return -self.forward_velocity(x, 1.0 - tau)

    def to_config(self):
        return {
            "kind": self.kind,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
            "delay": self.delay,
        }

    @classmethod
    def random(cls, dim: int, n_components: int = 3, seed: int = 0, scale_range=(0.3, 0.6),
               spread: float = 2.0, delay: float = 0.0) -> "GaussianMixtureField":
        """A reproducible random mixture, used by the CLI defaults and tests."""
        rng = np.random.default_rng(seed)
        weights = rng.uniform(0.5, 1.5, n_components)
        weights /= weights.sum()
        means = rng.normal(0.0, spread, (n_components, dim))
        scales = rng.uniform(*scale_range, n_components)
        return cls(weights, means, scales, delay=delay)


@dataclass(eq=False)
class ScriptedField(VelocityField):
    """Per-step velocity table; row ``i`` is returned at step ``i`` whatever ``x`` is.

    When no step index is supplied (fine-grid reference integration) the row is
    chosen from ``tau`` on a uniform grid of ``n_steps`` steps.
    """

    table: np.ndarray
    n_steps: int | None = None
    delay: float = 0.0
    kind: str = dc_field(default="scripted", init=False)

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=float)
        if self.table.ndim == 1:
            self.table = self.table[:, None]
        if self.table.ndim != 2 or self.table.shape[0] == 0:
            raise ValueError("scripted table must be a non-empty 2-D array (rows = steps)")
        if self.n_steps is None:
            self.n_steps = self.table.shape[0]
        if self.n_steps > self.table.shape[0]:
            raise ValueError(f"scripted table has {self.table.shape[0]} rows, fewer than n_steps={self.n_steps}")
        _check_delay(self.delay)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def row_for(self, tau: float) -> int:
        k = min(int(math.floor(tau * self.n_steps + 1e-9)), self.n_steps - 1)
        return self.n_steps - 1 - k

    def velocity(self, x, tau, step=None):
        row = self.row_for(tau) if step is None else step
        if not 0 <= row < self.table.shape[0]:
            raise FieldError(f"scripted field has no row for step {row}")
        return np.broadcast_to(self.table[row], np.shape(x)).copy()

    def to_config(self):
        return {"kind": self.kind, "table": self.table.tolist(), "n_steps": self.n_steps, "delay": self.delay}


def _check_delay(delay):
    if not delay >= 0:
        raise ValueError(f"eval delay must be >= 0 seconds, got {delay!r}")


def _responsibilities(x, log_w, m, s2):
    n = m.shape[1]
    diff = x[..., None, :] - m
    sq = np.einsum("...kn,...kn->...k", diff, diff)
    logp = log_w - 0.5 * n * np.log(2.0 * np.pi * s2) - 0.5 * sq / s2
    top = np.max(logp, axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        # every likelihood underflowed: nearest component by scaled distance
        nearest = np.argmin(sq / s2, axis=-1)
        return np.eye(m.shape[0])[nearest]
    w = np.exp(logp - top)
    return w / w.sum(axis=-1, keepdims=True)


def mixture_responsibilities(field: GaussianMixtureField, x, t: float) -> np.ndarray:
    """Posterior component weights of ``x`` under the mixture marginal at forward time ``t``.

    Computed in log space; on exact ties ``argmax``-style consumers resolve to
    the lowest component index.
    """
    if not isinstance(field, GaussianMixtureField):
        raise TypeError(f"responsibilities need a gaussian-mixture field, got {field.kind}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return field.responsibilities(x, t)


def eval_velocity(field: VelocityField, x, tau: float, counter: EvalCounter | None = None,
                  step: int | None = None) -> np.ndarray:
    """Evaluate ``field`` at ``(x, tau)`` as the sampler's stand-in for the network.

    Increments ``counter`` once per evaluated state (a ``(batch, n)`` input
    counts ``batch`` evaluations) and then honours the field's artificial
    per-call delay.
    """
    x = np.asarray(x, dtype=float)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if not np.all(np.isfinite(x)):
        raise FieldError(f"non-finite input state to {field.kind} field at tau={tau:.6g}")
    with np.errstate(over="ignore", invalid="ignore"):
        v = field.velocity(x, tau, step)
    if not np.all(np.isfinite(v)):
        raise FieldError(f"{field.kind} field returned non-finite velocity at tau={tau:.6g}")
    if counter is not None:
        counter.increment(1 if x.ndim == 1 else x.shape[0])
    if field.delay > 0:
        time.sleep(field.delay)
    return v


def reference_endpoint(field: VelocityField, x_start, t_ref_steps: int = 100_000,
                       bound: float = 1e12, counter: EvalCounter | None = None) -> np.ndarray:
    """Fine uniform Euler integration over the unit interval (ground-truth endpoint).

    Evaluates the field directly, skipping the artificial delay. ``x_start``
    may be a batch of states.
    """
    if t_ref_steps < 1000:
        raise ValueError(f"t_ref_steps must be >= 1000 for a reference solution, got {t_ref_steps}")
    x = np.array(x_start, dtype=float)
    dt = 1.0 / t_ref_steps
    for k in range(t_ref_steps):
        v = field.velocity(x, k * dt)
        x = x + dt * v
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > bound:
            raise FieldError(
                f"reference integration of {field.kind} field diverged at fine step {k} "
                f"(tau={k * dt:.6g}, bound={bound:g})"
            )
    if counter is not None:
        counter.increment(t_ref_steps * (1 if x.ndim == 1 else x.shape[0]))
    return x


def sample_noise(seed: int, shape) -> np.ndarray:
    """Standard-normal start state from NumPy's PCG64 generator seeded with ``seed``."""
    shape = LatentShape.coerce(shape)
    return np.random.default_rng(seed).standard_normal(shape.n)


def load_table_csv(path) -> np.ndarray:
    """Read a scripted velocity table: one row per step, comma-separated reals."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: empty velocity table")
    if len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: rows have differing lengths")
    return np.array(rows)


def field_from_config(cfg: dict, base_dir=None) -> VelocityField:
    """Build a field from its JSON configuration block."""
    cfg = dict(cfg)
    kind = cfg.pop("kind", None)
    delay = float(cfg.pop("delay", 0.0))
    if kind == "affine":
        return AffineField(cfg["A0"], cfg["b0"], cfg.get("A1"), cfg.get("b1"), delay=delay)
    if kind == "affine-plus-identity":
        if "offset" not in cfg:
            cfg["offset"] = np.ones(int(cfg["dim"]))
        return AffinePlusIdentityField(cfg["offset"], delay=delay)
    if kind == "gaussian-mixture":
        if "means" in cfg:
            return GaussianMixtureField(cfg["weights"], cfg["means"], cfg["scales"], delay=delay)
        return GaussianMixtureField.random(
            int(cfg["dim"]),
            n_components=int(cfg.get("components", 3)),
            seed=int(cfg.get("seed", 0)),
            scale_range=tuple(cfg.get("scale_range", (0.3, 0.6))),
            spread=float(cfg.get("spread", 2.0)),
            delay=delay,
        )
    if kind == "scripted":
        if "table_csv" in cfg:
            path = Path(cfg["table_csv"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            table = load_table_csv(path)
        else:
            table = cfg["table"]
        return ScriptedField(table, n_steps=cfg.get("n_steps"), delay=delay)
    raise ValueError(f"unknown field kind {kind!r}")


def field_hash(field: VelocityField) -> str:
    """SHA-256 of the field's canonical configuration (delay excluded)."""
    cfg = field.to_config()
    cfg.pop("delay", None)
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
