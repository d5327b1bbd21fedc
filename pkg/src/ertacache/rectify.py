"""Closed-form error rectification for cached velocities.

The feature-shift error of a cached step is modelled as
``eps ~= sigmoid(K * v_tilde + B)`` with scalar ``K`` and ``B``. Replacing the
sigmoid by its first-order expansion ``(K v + B) / 4 + 1/2`` turns the fit into
ordinary least squares with intercept, solved here from centred sums:

    K = 4 * S_ve / S_vv
    B = 4 * (mean(eps) - 1/2) - K * mean(v)

The intercept follows from the first normal equation,
``B/4 + 1/2 + K mean(v)/4 = mean(eps)``.

Two independent oracles back the closed form: a direct least-squares solve of
the same linearised objective, and gradient descent on the exact sigmoid loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

__all__ = [
    "RectParams",
    "SigmoidFit",
    "fit_kb",
    "fit_kb_oracle_ls",
    "fit_kb_oracle_sigmoid",
    "rectify_velocity",
    "linearized_loss",
    "sigmoid_loss",
    "sigmoid",
    "LinearizedSigmoidRegressor",
    "RECTIFY_MODES",
]

logger = logging.getLogger(__name__)

RECTIFY_MODES = ("off", "sigmoid", "linearized")
TINY = 1e-30


@dataclass(frozen=True)
class RectParams:
    K: float
    B: float
    s_vv: float
    s_ve: float
    eps_mean: float
    v_mean: float
    n_samples: int
    degenerate: bool = False


@dataclass(frozen=True)
class SigmoidFit:
    K: float
    B: float
    loss: float
    closed_form_loss: float
    converged: bool
    halvings: int
    iterations: int


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def _pooled(v_samples, eps_samples):
    v = np.asarray(v_samples, dtype=float).ravel()
    e = np.asarray(eps_samples, dtype=float).ravel()
    if v.size != e.size:
        raise ValueError(f"sample counts differ: {v.size} velocities vs {e.size} errors")
    if v.size < 2:
        raise ValueError("need at least 2 samples to fit K and B")
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(e))):
        raise ValueError("samples must be finite")
    return v, e


def fit_kb(v_samples, eps_samples) -> RectParams:
    """Closed-form ``(K, B)`` pooled over every element of every sample.

    A constant ``v_tilde`` (``S_vv < 1e-30``) leaves the slope undetermined;
    ``K`` is then set to 0 and the fit is flagged ``degenerate``.
    """
    v, e = _pooled(v_samples, eps_samples)
    v_mean = v.mean()
    e_mean = e.mean()
    dv = v - v_mean
    s_vv = float(dv @ dv)
    s_ve = float(dv @ (e - e_mean))
    degenerate = s_vv < TINY
    K = 0.0 if degenerate else 4.0 * s_ve / s_vv
    B = 4.0 * (e_mean - 0.5) - K * v_mean
    return RectParams(float(K), float(B), s_vv, s_ve, float(e_mean), float(v_mean), v.size, degenerate)


def fit_kb_oracle_ls(v_samples, eps_samples) -> tuple[float, float]:
    """Minimise ``mean[eps - (K v + B)/4 - 1/2]^2`` by a direct least-squares solve."""
    v, e = _pooled(v_samples, eps_samples)
    design = np.column_stack([v, np.ones_like(v)]) / 4.0
    coef, _, rank, _ = np.linalg.lstsq(design, e - 0.5, rcond=None)
    if rank < 2:
        return 0.0, float(4.0 * (e.mean() - 0.5))
    return float(coef[0]), float(coef[1])


def linearized_loss(v_samples, eps_samples, K, B) -> float:
    v, e = _pooled(v_samples, eps_samples)
    r = e - 0.25 * (K * v + B) - 0.5
    return float(np.mean(r * r))


def sigmoid_loss(v_samples, eps_samples, K, B) -> float:
    v, e = _pooled(v_samples, eps_samples)
    r = e - sigmoid(K * v + B)
    return float(np.mean(r * r))


def fit_kb_oracle_sigmoid(v_samples, eps_samples, iters: int = 5000, rate: float = 8.0,
                          init: tuple[float, float] | None = None, tol: float = 1e-12) -> SigmoidFit:
    """Full-batch gradient descent on the exact loss ``mean[eps - sigmoid(K v + B)]^2``.

    Starts from ``init`` (default: the closed-form fit) and keeps the best
    iterate seen, so the returned loss never exceeds the starting loss. Ten
    consecutive loss increases halve the rate and restart from the best
    iterate; after five halvings the fit is reported as not converged.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    v, e = _pooled(v_samples, eps_samples)
    if init is None:
        p = fit_kb(v, e)
        init = (p.K, p.B)
    K, B = float(init[0]), float(init[1])
    cf = fit_kb(v, e)
    cf_loss = sigmoid_loss(v, e, cf.K, cf.B)

    def loss_grad(K, B):
        s = sigmoid(K * v + B)
        r = e - s
        g = -2.0 * r * s * (1.0 - s)
        return float(np.mean(r * r)), float(np.mean(g * v)), float(np.mean(g))

    best = (K, B)
    best_loss, gK, gB = loss_grad(K, B)
    prev_loss = best_loss
    increases = 0
    halvings = 0
    converged = True
    it = 0
    for it in range(1, iters + 1):
        if gK * gK + gB * gB < tol * tol or rate == 0.0:
            break
        K -= rate * gK
        B -= rate * gB
        loss, gK, gB = loss_grad(K, B)
        if not np.isfinite(loss):
            loss = np.inf
        if loss < best_loss:
            best, best_loss = (K, B), loss
        increases = increases + 1 if loss > prev_loss else 0
        prev_loss = loss
        if increases >= 10:
            halvings += 1
            if halvings > 5:
                converged = False
                logger.warning("sigmoid oracle diverged after %d rate halvings", halvings - 1)
                break
            rate *= 0.5
            K, B = best
            prev_loss, gK, gB = loss_grad(K, B)
            increases = 0
    return SigmoidFit(best[0], best[1], best_loss, cf_loss, converged, min(halvings, 5), it)


def rectify_velocity(v_tilde, K: float, B: float, mode: str = "linearized") -> np.ndarray:
    """Subtract the modelled feature-shift error from a cached velocity."""
    if not (np.isfinite(K) and np.isfinite(B)):
        raise ValueError(f"rectification parameters must be finite, got K={K}, B={B}")
    v_tilde = np.asarray(v_tilde, dtype=float)
    z = K * v_tilde + B
    if mode == "sigmoid":
        return v_tilde - sigmoid(z)
    if mode == "linearized":
        return v_tilde - (0.25 * z + 0.5)
    raise ValueError(f"unknown rectify mode {mode!r}; expected 'sigmoid' or 'linearized'")


class LinearizedSigmoidRegressor(BaseEstimator, RegressorMixin):
    """Scikit-learn wrapper around :func:`fit_kb`.

    ``X`` holds cached velocities and ``y`` the matching errors; both are
    pooled elementwise (any shape, same size). ``predict`` returns the
    modelled error.

    Parameters
    ----------
    mode : {'linearized', 'sigmoid'}
        Link used by ``predict``. The fit itself is always the closed form.
    """

    def __init__(self, mode: str = "linearized"):
        self.mode = mode

    def fit(self, X, y):
        X = check_array(X, ensure_2d=False, allow_nd=True)
        y = check_array(y, ensure_2d=False, allow_nd=True)
        params = fit_kb(X, y)
        self.coef_ = params.K
        self.intercept_ = params.B
        self.params_ = params
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, ensure_2d=False, allow_nd=True)
        z = self.coef_ * X + self.intercept_
        if self.mode == "sigmoid":
            return sigmoid(z)
        if self.mode == "linearized":
            return 0.25 * z + 0.5
        raise ValueError(f"unknown mode {self.mode!r}")

    def correct(self, X):
        """``X - predict(X)``: the rectified velocity."""
        X = check_array(X, ensure_2d=False, allow_nd=True)
        return X - self.predict(X)
