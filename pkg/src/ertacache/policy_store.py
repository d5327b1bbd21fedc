"""Versioned, canonical on-disk format for cache policies.

A policy file (``*.ertapolicy.json``) is JSON with sorted keys, two-space
indentation and every float written with 17 significant digits, so that a
save/load round trip is bit exact and two saves of one policy are byte
identical. Per-step arrays (``dt``, ``phi``, ``K``, ``B``) are indexed by step
number: entry ``i`` belongs to step ``i`` and step ``T-1`` is integrated first.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .schedule import StepSchedule

__all__ = [
    "FORMAT_VERSION",
    "POLICY_SUFFIX",
    "CachePolicy",
    "PolicyError",
    "PolicyFormatError",
    "PolicyVersionError",
    "PolicyValidationError",
    "save_policy",
    "load_policy",
    "dumps_canonical",
]

FORMAT_VERSION = 1
POLICY_SUFFIX = ".ertapolicy.json"


class PolicyError(ValueError):
    """Base class for policy file problems."""


class PolicyFormatError(PolicyError):
    """The file is not parseable as a policy document."""


class PolicyVersionError(PolicyError):
    """The file was written by an incompatible format version."""


class PolicyValidationError(PolicyError):
    """The policy violates one of its invariants."""


@dataclass(eq=False)
class CachePolicy:
    """Everything inference needs: which steps reuse the cache, the step sizes,
    and the per-step rectification parameters."""

    T: int
    threshold: float
    cached_steps: tuple[int, ...]
    dt: np.ndarray
    K: np.ndarray
    B: np.ndarray
    phi: np.ndarray
    latent_shape: tuple[int, int, int, int] = (1, 1, 1, 1)
    rectification: bool = True
    provenance: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.T = int(self.T)
        self.threshold = float(self.threshold)
        self.cached_steps = tuple(sorted((int(i) for i in self.cached_steps), reverse=True))
        self.dt = np.asarray(self.dt, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        self.latent_shape = tuple(int(v) for v in self.latent_shape)

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule.from_steps(self.dt)

    @property
    def n_cached(self) -> int:
        return len(self.cached_steps)

    @classmethod
    def uniform(cls, T: int, cached_steps=(), latent_shape=(1, 1, 1, 1), threshold=0.0, **provenance):
        """Uniform-step policy with no rectification parameters."""
        return cls(
            T=T,
            threshold=threshold,
            cached_steps=tuple(cached_steps),
            dt=np.full(T, 1.0 / T),
            K=np.zeros(T),
            B=np.zeros(T),
            phi=np.ones(T),
            latent_shape=latent_shape,
            rectification=False,
            provenance=dict(provenance),
        )

    def validate(self) -> "CachePolicy":
        T = self.T
        if T < 1:
            raise PolicyValidationError(f"T must be >= 1, got {T}")
        for name in ("dt", "K", "B", "phi"):
            arr = getattr(self, name)
            if arr.shape != (T,):
                raise PolicyValidationError(f"{name} has shape {arr.shape}, expected ({T},)")
        if not np.all(np.isfinite(self.dt)) or np.any(self.dt < 0):
            raise PolicyValidationError("dt entries must be finite and >= 0")
        total = math.fsum(self.dt)
        if abs(total - 1.0) > 1e-12:
            raise PolicyValidationError(f"dt sums to {total!r}, not 1 within 1e-12")
        S = self.cached_steps
        if len(set(S)) != len(S):
            raise PolicyValidationError("cached steps contain duplicates")
        if 0 in S or (T - 1) in S:
            raise PolicyValidationError(f"boundary step cached: steps 0 and {T - 1} must always be computed")
        if any(not 0 < i < T - 1 for i in S):
            raise PolicyValidationError(f"cached steps {S} outside 1..{T - 2}")
        if not (np.all(np.isfinite(self.K)) and np.all(np.isfinite(self.B))):
            raise PolicyValidationError("K and B must be finite")
        if np.any(self.phi < 0) or np.any(self.phi > 1) or not np.all(np.isfinite(self.phi)):
            raise PolicyValidationError("phi entries must lie in [0, 1]")
        if not self.threshold >= 0:
            raise PolicyValidationError(f"threshold must be >= 0, got {self.threshold}")
        if len(self.latent_shape) != 4 or any(v < 1 for v in self.latent_shape):
            raise PolicyValidationError(f"bad latent shape {self.latent_shape}")
        return self

    def to_dict(self) -> dict:
        return {
            "format": "ertapolicy",
            "version": self.version,
            "T": self.T,
            "threshold": _float_out(self.threshold),
            "cached_steps": list(self.cached_steps),
            "dt": self.dt.tolist(),
            "phi": self.phi.tolist(),
            "K": self.K.tolist(),
            "B": self.B.tolist(),
            "latent_shape": list(self.latent_shape),
            "rectification": bool(self.rectification),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CachePolicy":
        if not isinstance(doc, dict) or doc.get("format") != "ertapolicy":
            raise PolicyFormatError("not a policy document (missing format tag 'ertapolicy')")
        version = doc.get("version")
        if version != FORMAT_VERSION:
            raise PolicyVersionError(f"policy format version {version!r} is not supported (expected {FORMAT_VERSION})")
        try:
            return cls(
                T=doc["T"],
                threshold=_float_in(doc["threshold"]),
                cached_steps=doc["cached_steps"],
                dt=doc["dt"],
                K=doc["K"],
                B=doc["B"],
                phi=doc["phi"],
                latent_shape=doc["latent_shape"],
                rectification=doc["rectification"],
                provenance=doc.get("provenance", {}),
                version=version,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PolicyFormatError(f"malformed policy document: {exc!r}") from None

    def __eq__(self, other):
        if not isinstance(other, CachePolicy):
            return NotImplemented
        return dumps_canonical(self.to_dict()) == dumps_canonical(other.to_dict())


def _float_out(x: float):
    return "inf" if x == math.inf else x


def _float_in(x):
    if x == "inf":
        return math.inf
    return float(x)


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise PolicyValidationError(f"cannot serialise non-finite float {x!r}")
    s = format(x, ".17g")
    if not any(c in s for c in ".en"):
        s += ".0"
    return s


def dumps_canonical(obj, indent: int = 2) -> str:
    """JSON with sorted keys and 17-significant-digit floats."""

    def enc(o, level):
        pad = " " * (indent * (level + 1))
        end = " " * (indent * level)
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            return _fmt_float(float(o))
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{pad}{json.dumps(str(k))}: {enc(o[k], level + 1)}" for k in sorted(o)]
            return "{\n" + ",\n".join(items) + "\n" + end + "}"
        if isinstance(o, (list, tuple, np.ndarray)):
            seq = list(o)
            if not seq:
                return "[]"
            if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
                return "[" + ", ".join(enc(v, level + 1) for v in seq) + "]"
            return "[\n" + ",\n".join(pad + enc(v, level + 1) for v in seq) + "\n" + end + "]"
        raise TypeError(f"cannot serialise {type(o).__name__}")

    return enc(obj, 0) + "\n"


def save_policy(policy: CachePolicy, path) -> Path:
    """Validate and write ``policy`` atomically (temp file + rename)."""
    policy.validate()
    text = dumps_canonical(policy.to_dict())
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        with os.fdopen(fd, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"could not write policy to {path}: {exc}") from exc
    return path


def load_policy(path) -> CachePolicy:
    path = Path(path)
    raw = path.read_bytes()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise PolicyFormatError(f"{path}: not UTF-8 text (byte offset {exc.start})") from None
    except json.JSONDecodeError as exc:
        offset = len(exc.doc[: exc.pos].encode("utf-8"))
        raise PolicyFormatError(f"{path}: parse error at byte offset {offset}: {exc.msg}") from None
    policy = CachePolicy.from_dict(doc)
    try:
        return policy.validate()
    except PolicyValidationError as exc:
        raise PolicyValidationError(f"{path}: {exc}") from None
