from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .calibration import AGGREGATIONS, build_policy, log_ground_truth, search_policy, threshold_for_count
from .field import LatentShape, VelocityField
from .policy_store import CachePolicy
from .rectify import RECTIFY_MODES
from .sampler import cached_sample, full_sample, run_batch

__all__ = ["ERTACacheSampler"]


class ERTACacheSampler(BaseEstimator, TransformerMixin):
    """Cache-accelerated Euler sampler with offline calibration.

    ``fit`` takes a batch of calibration start states (rows of ``X``), profiles
    them, picks the cached-step set and fits timestep adjustment and
    rectification. ``transform`` maps start states to sampled endpoints using
    the fitted policy.

    Parameters
    ----------
    field : VelocityField
        Velocity provider integrated by the sampler.
    n_steps : int, default=50
        Number of Euler steps ``T``.
    threshold : float, default=0.1
        Relative l1 reuse threshold. Ignored when ``target_cached`` is set.
    target_cached : int or None, default=None
        If given, the threshold is bisected so the cached set has about this
        many steps.
    aggregation : {'mean', 'max', 'quantile'}, default='mean'
        How per-prompt relative l1 errors are combined into one decision.
    quantile : float, default=0.5
        Quantile used when ``aggregation='quantile'``.
    adjust_timesteps : bool, default=True
        Shrink cached steps and redistribute the budget.
    rectify_mode : {'off', 'sigmoid', 'linearized'}, default='linearized'
        Correction applied to cached velocities at sampling time.
    latent_shape : LatentShape, int, sequence of 4 ints or None
        Recorded in the policy; defaults to a flat shape of the field's dimension.
    workers : int, default=1
        Thread count for per-sample trajectories in ``transform``.

    Attributes
    ----------
    policy_ : CachePolicy
    profile_ : CalibrationProfile
    artifacts_ : CalibrationArtifacts
    threshold_ : float
        Threshold actually used.
    cached_steps_ : tuple of int
    """

    def __init__(self, field: VelocityField | None = None, n_steps=50, threshold=0.1, target_cached=None,
                 aggregation="mean", quantile=0.5, adjust_timesteps=True, rectify_mode="linearized",
                 latent_shape=None, workers=1):
        self.field = field
        self.n_steps = n_steps
        self.threshold = threshold
        self.target_cached = target_cached
        self.aggregation = aggregation
        self.quantile = quantile
        self.adjust_timesteps = adjust_timesteps
        self.rectify_mode = rectify_mode
        self.latent_shape = latent_shape
        self.workers = workers

    def _validate_params(self):
        if not isinstance(self.field, VelocityField):
            raise TypeError(f"field must be a VelocityField, got {type(self.field).__name__}")
        if not isinstance(self.n_steps, numbers.Integral) or self.n_steps < 2:
            raise ValueError(f"n_steps must be an integer >= 2, got {self.n_steps!r}")
        if self.target_cached is None and not self.threshold >= 0:
            raise ValueError(f"threshold must be >= 0, got {self.threshold!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.rectify_mode not in RECTIFY_MODES:
            raise ValueError(f"rectify_mode must be one of {RECTIFY_MODES}, got {self.rectify_mode!r}")

    def _check_X(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.field.dim:
            raise ValueError(f"X has {X.shape[1]} features but the field has dimension {self.field.dim}")
        return X

    def fit(self, X, y=None, seeds=None):
        """Calibrate on start states ``X`` of shape ``(n_prompts, n)``.

        ``seeds`` only labels the prompts in the policy provenance.
        """
        self._validate_params()
        X = self._check_X(X)
        seeds = list(range(X.shape[0])) if seeds is None else [int(s) for s in seeds]
        prompts = [(self.field, s) for s in seeds]
        profile = log_ground_truth(prompts, self.n_steps, x_start=X)
        if self.target_cached is not None:
            threshold, _ = threshold_for_count(profile, int(self.target_cached), self.aggregation, self.quantile)
        else:
            threshold = float(self.threshold)
        artifacts = search_policy(profile, threshold, self.aggregation, self.quantile)
        shape = self.latent_shape if self.latent_shape is not None else X.shape[1]
        self.policy_ = build_policy(profile, artifacts, self.adjust_timesteps, shape=shape)
        self.profile_ = profile
        self.artifacts_ = artifacts
        self.threshold_ = threshold
        self.cached_steps_ = artifacts.cached_steps
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_policy(cls, field: VelocityField, policy: CachePolicy, rectify_mode="linearized", workers=1):
        """A ready-to-use sampler around an existing (e.g. loaded) policy."""
        policy.validate()
        shape = LatentShape(*policy.latent_shape)
        if shape.n != field.dim:
            raise ValueError(f"policy latent size {shape.n} does not match field dimension {field.dim}")
        est = cls(field=field, n_steps=policy.T, threshold=policy.threshold, rectify_mode=rectify_mode,
                  latent_shape=shape, workers=workers)
        est.policy_ = policy
        est.threshold_ = policy.threshold
        est.cached_steps_ = policy.cached_steps
        est.n_features_in_ = field.dim
        return est

    def sample(self, X, cached=True, record=True):
        """Trajectory records, one per row of ``X``."""
        check_is_fitted(self, "policy_")
        X = self._check_X(X)
        if cached:
            mode = self.rectify_mode if self.policy_.cached_steps else "off"
            fn = lambda x: cached_sample(self.field, x, self.policy_, mode, record=record)
        else:
            fn = lambda x: full_sample(self.field, x, self.policy_.T, record=record)
        return run_batch(fn, list(X), self.workers)

    def transform(self, X):
        """Cached-sampling endpoints, shape ``(n_samples, n)``."""
        return np.stack([r.endpoint for r in self.sample(X, record=False)])

    def transform_full(self, X):
        """Endpoints of uniform full-compute sampling with the same step count."""
        return np.stack([r.endpoint for r in self.sample(X, cached=False, record=False)])

    def score(self, X, y=None):
        """Negative mean squared endpoint gap between cached and full sampling."""
        return -float(np.mean((self.transform(X) - self.transform_full(X)) ** 2))
