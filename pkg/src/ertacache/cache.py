"""Single-slot residual cache.

At a computed step the cache stores ``r = v - x``; at a skipped step the
velocity is rebuilt as ``x + r`` from the *current* state.
"""

from __future__ import annotations

import numpy as np

__all__ = ["CacheError", "ResidualCache"]


class CacheError(RuntimeError):
    pass


class ResidualCache:
    """One cached residual per in-flight trajectory."""

    def __init__(self):
        self.residual: np.ndarray | None = None
        self.refreshed_at: int | None = None

    @property
    def valid(self) -> bool:
        return self.residual is not None

    def refresh(self, v, x, step: int) -> "ResidualCache":
        v = np.asarray(v, dtype=float)
        x = np.asarray(x, dtype=float)
        if v.shape != x.shape:
            raise CacheError(f"velocity shape {v.shape} does not match state shape {x.shape}")
        if self.residual is not None and self.residual.shape != x.shape:
            raise CacheError(f"state shape {x.shape} does not match cached residual {self.residual.shape}")
        self.residual = v - x
        self.refreshed_at = step
        return self

    def reuse(self, x) -> np.ndarray:
        if self.residual is None:
            raise CacheError("reuse before refresh: the cache holds no residual yet")
        x = np.asarray(x, dtype=float)
        if x.shape != self.residual.shape:
            raise CacheError(f"state shape {x.shape} does not match cached residual {self.residual.shape}")
        return x + self.residual

    def __repr__(self):
        return f"ResidualCache(valid={self.valid}, refreshed_at={self.refreshed_at})"
