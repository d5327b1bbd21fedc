"""Residual caching for Euler flow-matching samplers.

Offline calibration picks which steps may reuse a cached residual, shrinks
those steps and redistributes the saved budget, and fits a closed-form
per-step correction for the error the cache introduces.
"""

from .analysis import (
    MetricsReport,
    endpoint_metrics,
    feature_shift,
    trajectory_deviation,
    verify_decomposition,
)
from .cache import CacheError, ResidualCache
from .calibration import (
    CalibrationArtifacts,
    CalibrationProfile,
    build_policy,
    calibrate,
    collect_samples,
    log_ground_truth,
    relative_l1,
    search_policy,
    sweep_lambda,
)
from .estimator import ERTACacheSampler
from .field import (
    AffineField,
    AffinePlusIdentityField,
    EvalCounter,
    GaussianMixtureField,
    LatentShape,
    ScriptedField,
    eval_velocity,
    mixture_responsibilities,
    reference_endpoint,
    sample_noise,
)
from .policy_store import CachePolicy, load_policy, save_policy
from .rectify import LinearizedSigmoidRegressor, fit_kb, fit_kb_oracle_ls, fit_kb_oracle_sigmoid, rectify_velocity
from .sampler import TrajectoryRecord, cached_sample, euler_step, full_sample
from .schedule import StepSchedule, build_schedule, compute_phi, evenly_spaced_steps, uniform_schedule

__version__ = "0.1.0"
