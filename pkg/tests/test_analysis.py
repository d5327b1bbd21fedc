import json
import math

import numpy as np
import pytest

from ertacache import (
    AffinePlusIdentityField,
    CachePolicy,
    GaussianMixtureField,
    ScriptedField,
    cached_sample,
    full_sample,
    sample_noise,
)
from ertacache.analysis import (
    ScheduleMismatchError,
    cached_runs,
    decomposition_checks,
    endpoint_metrics,
    feature_shift,
    local_feature_shift,
    mse,
    psnr,
    trajectory_deviation,
    verify_decomposition,
)
from ertacache.field import EvalCounter
from ertacache.schedule import build_schedule


def pair(field, T, S, seed=0, x=None):
    x = sample_noise(seed, field.dim) if x is None else x
    return cached_sample(field, x, CachePolicy.uniform(T, S)), full_sample(field, x, T)


class TestFeatureShift:
    def test_zero(self):
        v = np.array([1.0, 2.0])
        np.testing.assert_array_equal(feature_shift(v, v), [0.0, 0.0])

    def test_arithmetic(self):
        np.testing.assert_array_equal(feature_shift(np.array([1.0, 1.0]), np.array([0.5, 2.0])), [0.5, -1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            feature_shift(np.zeros(2), np.zeros(3))

    def test_zero_shift_field(self):
        f = AffinePlusIdentityField([0.3, -0.4])
        c, _ = pair(f, 12, [3, 4, 8])
        shifts = local_feature_shift(c, f)
        assert set(shifts) == {3, 4, 8}
        for e in shifts.values():
            assert np.max(np.abs(e)) < 1e-14


class TestDeviation:
    def test_no_cache(self, mixture16):
        c, f = pair(mixture16, 20, [])
        led = trajectory_deviation(c, f)
        assert np.all(led.delta == 0.0)

    def test_start_is_shared(self, mixture16):
        c, f = pair(mixture16, 20, [5, 6])
        led = trajectory_deviation(c, f)
        assert np.all(led.delta_at(19) == 0.0)
        # nothing happens before the first cached step
        for i in range(19, 5, -1):
            assert np.all(led.delta_at(i) == 0.0)
        assert np.any(led.delta_at(5) != 0.0)

    def test_single_cached_step(self, mixture16):
        c, f = pair(mixture16, 20, [7])
        led = trajectory_deviation(c, f)
        np.testing.assert_allclose(led.delta_at(6), led.dt[12] * led.eps[7], rtol=0, atol=1e-15)

    def test_scripted_endpoint(self, scripted4):
        c, f = pair(scripted4, 4, [1], x=np.array([0.0]))
        led = trajectory_deviation(c, f)
        np.testing.assert_allclose(led.delta_at(0), [0.125])
        np.testing.assert_allclose(led.delta_at(-1), [0.125])

    def test_zero_shift_field(self):
        f = AffinePlusIdentityField([1.0, -2.0, 0.5])
        c, g = pair(f, 25, range(1, 24))
        assert np.max(np.abs(trajectory_deviation(c, g).delta)) < 1e-13

    def test_schedule_mismatch(self, mixture16):
        x = sample_noise(0, 16)
        pol = CachePolicy.uniform(10, [4])
        pol.dt = build_schedule(10, [4], {4: 0.5}).by_step()
        with pytest.raises(ScheduleMismatchError):
            trajectory_deviation(cached_sample(mixture16, x, pol), full_sample(mixture16, x, 10))

    def test_start_mismatch(self, mixture16):
        with pytest.raises(ScheduleMismatchError):
            trajectory_deviation(cached_sample(mixture16, sample_noise(0, 16), CachePolicy.uniform(10, [])),
                                 full_sample(mixture16, sample_noise(1, 16), 10))

    def test_lean_records_rejected(self, mixture16):
        x = sample_noise(0, 16)
        with pytest.raises(ValueError):
            trajectory_deviation(full_sample(mixture16, x, 5, record=False), full_sample(mixture16, x, 5))


class TestDecomposition:
    def test_runs(self, scripted4):
        c, _ = pair(ScriptedField([[1.0]] * 12), 12, [9, 8, 5, 2, 1], x=np.array([0.0]))
        assert cached_runs(c) == [(9, 8), (5, 5), (2, 1)]

    def test_single_step_exact(self, mixture16):
        c, f = pair(mixture16, 20, [7])
        assert verify_decomposition(c, f) <= 1e-15

    def test_scripted_two_step_run(self):
        f = ScriptedField([[3.0], [1.0], [-2.0], [0.5], [4.0], [2.0]])
        c, g = pair(f, 6, [3, 2], x=np.array([0.0]))
        checks = decomposition_checks(c, g)
        assert len(checks) == 1 and checks[0].length == 2
        assert checks[0].residual < 1e-15

    @pytest.mark.parametrize("dim", [2, 16])
    def test_mixture_random_runs(self, dim):
        f = GaussianMixtureField.random(dim, 3, seed=dim)
        rng = np.random.default_rng(dim)
        for k in range(10):
            S = [i for i in range(1, 49) if rng.random() < 0.4]
            c, g = pair(f, 50, S, seed=k)
            assert verify_decomposition(c, g) <= 1e-9

    def test_no_cached_steps(self, mixture16):
        c, f = pair(mixture16, 10, [])
        assert verify_decomposition(c, f) == 0.0 and decomposition_checks(c, f) == []

    def test_local_shift_costs_one_eval_per_cached_step(self, mixture16):
        c, _ = pair(mixture16, 20, [3, 9, 10])
        counter = EvalCounter()
        local_feature_shift(c, mixture16, counter)
        assert counter.count == 3


class TestMetrics:
    def test_identical(self):
        r = endpoint_metrics(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        assert r.mse_vs_reference == 0.0 and r.psnr_vs_reference == math.inf
        assert r.to_dict()["psnr_vs_reference"] == "inf"

    def test_offset(self):
        ref = np.array([0.0, 2.0, 1.0])
        r = endpoint_metrics(ref + 0.1, ref)
        assert r.mse_vs_reference == pytest.approx(0.01)
        assert r.psnr_vs_reference == pytest.approx(10 * math.log10(400))
        assert r.psnr_vs_reference == pytest.approx(26.0206, abs=1e-4)

    def test_eval_ratio(self):
        r = endpoint_metrics(np.zeros(2), np.ones(2), T=50, n_cached=25)
        assert r.eval_ratio == 2.0

    def test_speedup(self):
        r = endpoint_metrics(np.zeros(2), np.ones(2), time_full=3.0, time_cached=1.5, evals_full=50, evals_cached=20)
        assert r.speedup == 2.0 and r.eval_ratio == 2.5

    def test_constant_reference_psnr(self):
        assert math.isnan(psnr(np.array([1.0, 2.0]), np.array([0.0, 0.0])))
        assert endpoint_metrics(np.array([1.0]), np.array([0.0])).to_dict()["psnr_vs_reference"] is None

    def test_psnr_decreases_with_mse(self):
        ref = np.array([0.0, 1.0, 2.0])
        values = [psnr(ref + d, ref) for d in (0.01, 0.1, 0.5, 2.0)]
        assert values == sorted(values, reverse=True)

    def test_json_safe(self):
        r = endpoint_metrics(np.array([1.0]), np.array([1.0]), full_endpoint=np.array([1.0]))
        json.dumps(r.to_dict(), allow_nan=False)

    def test_mse_shape(self):
        with pytest.raises(ValueError):
            mse(np.zeros(2), np.zeros(3))
