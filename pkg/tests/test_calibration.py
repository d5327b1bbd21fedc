import json
import math
import struct

import numpy as np
import pytest

from ertacache import AffinePlusIdentityField, EvalCounter, GaussianMixtureField, full_sample, sample_noise
from ertacache.calibration import (
    CalibrationError,
    aggregate_phi,
    build_policy,
    calibrate,
    collect_samples,
    creation_timestamp,
    fit_rectification,
    load_profile,
    log_ground_truth,
    make_prompts,
    read_residuals_bin,
    relative_l1,
    save_profile,
    search_policy,
    sweep_lambda,
    threshold_for_count,
    write_residuals_bin,
)


@pytest.fixture(scope="module")
def mix_profile():
    f = GaussianMixtureField.random(8, 3, seed=1)
    return log_ground_truth(make_prompts(f, range(100, 108)), 30)


class TestGroundTruth:
    def test_constant_residual_field(self):
        c = np.array([0.5, -1.0, 2.0])
        prof = log_ground_truth(make_prompts(AffinePlusIdentityField(c), [0, 1]), 10)
        np.testing.assert_allclose(prof.residuals, np.broadcast_to(c, prof.residuals.shape), atol=1e-14)

    def test_scripted_hand_values(self, scripted4):
        prof = log_ground_truth([(scripted4, 0)], 4, x_start=[[0.0]])
        got = [prof.r_gt(i)[0, 0] for i in (3, 2, 1, 0)]
        assert got == [1.0, 1.75, 1.25, 2.75]

    def test_exactly_T_evals_per_prompt(self, mixture16):
        c = EvalCounter()
        log_ground_truth(make_prompts(mixture16, range(5)), 12, counter=c)
        assert c.count == 60

    def test_matches_full_sampler(self, mixture16):
        prof = log_ground_truth(make_prompts(mixture16, [3]), 20)
        r = full_sample(mixture16, sample_noise(3, 16), 20)
        np.testing.assert_array_equal(prof.states[0], r.states)
        np.testing.assert_array_equal(prof.endpoints[0], r.endpoint)

    def test_seeds_differ(self, mixture16):
        prof = log_ground_truth(make_prompts(mixture16, [1, 2]), 5)
        assert not np.array_equal(prof.residuals[0], prof.residuals[1])

    def test_needs_two_steps(self, mixture16):
        with pytest.raises(ValueError):
            log_ground_truth(make_prompts(mixture16, [0]), 1)


class TestRelativeL1:
    def test_identical(self):
        r = np.array([1.0, -2.0])
        assert relative_l1(r, r, np.array([3.0, 0.0])) == 0.0

    def test_arithmetic(self):
        assert relative_l1(np.array([1.0, 0.0]), np.zeros(2), np.array([2.0, 0.0])) == 0.5

    def test_homogeneous(self, rng):
        a, b, g = rng.normal(size=(3, 6))
        assert relative_l1(3.7 * a, 3.7 * b, 3.7 * g) == pytest.approx(relative_l1(a, b, g), rel=1e-14)

    def test_zero_denominator(self):
        with pytest.raises(CalibrationError, match="degenerate ground-truth residual"):
            relative_l1(np.ones(2), np.zeros(2), np.zeros(2))


class TestSearchPolicy:
    def test_zero_threshold_caches_nothing(self, mix_profile):
        art = search_policy(mix_profile, 0.0)
        assert art.cached_steps == ()
        np.testing.assert_array_equal(art.endpoints, mix_profile.endpoints)

    def test_infinite_threshold_caches_interior(self, mix_profile):
        art = search_policy(mix_profile, math.inf)
        assert art.cached_steps == tuple(range(28, 0, -1))

    def test_constant_residual_field(self):
        prof = log_ground_truth(make_prompts(AffinePlusIdentityField([0.3, 0.7]), [0, 1, 2]), 12)
        art = search_policy(prof, 0.1)
        assert art.cached_steps == tuple(range(10, 0, -1))
        for s in art.samples.values():
            assert np.max(np.abs(s.eps)) < 1e-14

    def test_degenerate_ground_truth(self):
        prof = log_ground_truth(make_prompts(AffinePlusIdentityField([0.0, 0.0]), [0]), 6)
        with pytest.raises(CalibrationError, match="degenerate ground-truth residual"):
            search_policy(prof, 0.1)

    def test_boundaries_never_cached(self, mix_profile):
        for lam in (0.01, 0.1, 1.0, 1e9):
            S = search_policy(mix_profile, lam).cached_steps
            assert 0 not in S and 29 not in S

    def test_samples_only_for_cached_steps(self, mix_profile):
        art = search_policy(mix_profile, 0.1)
        assert set(art.samples) == set(art.cached_steps)
        for s in art.samples.values():
            np.testing.assert_array_equal(s.eps, s.v_tilde - s.v)

    def test_monotone_in_threshold(self, mix_profile):
        counts = [search_policy(mix_profile, lam).n_cached for lam in np.linspace(0, 0.5, 11)]
        assert counts == sorted(counts)

    def test_rel_l1_is_strict(self):
        prof = log_ground_truth(make_prompts(AffinePlusIdentityField([1.0]), [0]), 6)
        # every rel-l1 is exactly zero, so lambda = 0 must reject them all
        assert search_policy(prof, 0.0).cached_steps == ()

    @pytest.mark.parametrize("agg", ["mean", "max", "quantile"])
    def test_aggregations(self, mix_profile, agg):
        art = search_policy(mix_profile, 0.1, aggregation=agg, quantile=0.9)
        assert art.aggregation == agg

    def test_bad_aggregation(self, mix_profile):
        with pytest.raises(ValueError):
            search_policy(mix_profile, 0.1, aggregation="median")

    def test_negative_threshold(self, mix_profile):
        with pytest.raises(ValueError):
            search_policy(mix_profile, -0.1)

    def test_decisions_use_pass_two_state(self, mix_profile):
        # reused steps advance with the reconstruction, so trajectories diverge from pass one
        art = search_policy(mix_profile, 0.2)
        assert art.n_cached > 0
        assert not np.array_equal(art.endpoints, mix_profile.endpoints)


class TestCollectSamples:
    def test_fixed_set(self, mix_profile):
        art = collect_samples(mix_profile, [5, 10, 11])
        assert art.cached_steps == (11, 10, 5)
        assert set(art.samples) == {5, 10, 11}

    def test_boundary_rejected(self, mix_profile):
        with pytest.raises(ValueError):
            collect_samples(mix_profile, [0])

    def test_matches_threshold_search(self, mix_profile):
        a = search_policy(mix_profile, 0.15)
        b = collect_samples(mix_profile, a.cached_steps)
        for i in a.cached_steps:
            np.testing.assert_array_equal(a.samples[i].v_tilde, b.samples[i].v_tilde)


class TestPolicyAssembly:
    def test_build_policy(self, mix_profile):
        art = search_policy(mix_profile, 0.15)
        pol = build_policy(mix_profile, art, created="x")
        assert pol.cached_steps == art.cached_steps
        assert math.fsum(pol.dt) == pytest.approx(1.0, abs=1e-12)
        phi = aggregate_phi(art)
        fits = fit_rectification(art)
        for i in range(30):
            if i in phi:
                assert pol.phi[i] == phi[i] and pol.K[i] == fits[i].K and pol.B[i] == fits[i].B
            else:
                assert pol.phi[i] == 1.0 and pol.K[i] == 0.0 and pol.B[i] == 0.0
        assert pol.provenance["prompt_count"] == 8
        assert pol.provenance["seeds"] == list(range(100, 108))

    def test_without_adjustment(self, mix_profile):
        art = search_policy(mix_profile, 0.15)
        pol = build_policy(mix_profile, art, adjust_timesteps=False, created="x")
        assert np.all(pol.dt == 1 / 30)

    def test_constant_residual_fit(self):
        prof = log_ground_truth(make_prompts(AffinePlusIdentityField([0.3, 0.7]), [0, 1]), 8)
        pol = build_policy(prof, search_policy(prof, 0.1), created="x")
        for i in pol.cached_steps:
            assert abs(pol.K[i]) < 1e-12 and pol.B[i] == pytest.approx(-2.0, abs=1e-12)
            assert pol.phi[i] == pytest.approx(1.0, abs=1e-12)

    def test_phi_aggregations(self, mix_profile):
        art = search_policy(mix_profile, 0.15)
        lo, mid, hi = (aggregate_phi(art, h) for h in ("min", "median", "mean"))
        for i in art.cached_steps:
            assert lo[i] <= mid[i] and lo[i] <= hi[i]
        with pytest.raises(ValueError):
            aggregate_phi(art, "max")

    def test_calibrate_wrapper(self, mixture16):
        pol, prof, art = calibrate(make_prompts(mixture16, range(4)), 20, 0.1, created="2020-01-01T00:00:00+00:00")
        assert pol.T == 20 and prof.n_prompts == 4 and pol.cached_steps == art.cached_steps

    def test_timestamp_honours_source_date_epoch(self, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
        assert creation_timestamp() == "1970-01-01T00:00:00+00:00"


class TestThresholdForCount:
    def test_hits_target(self, mix_profile):
        lam, k = threshold_for_count(mix_profile, 14)
        assert k == 14 and search_policy(mix_profile, lam).n_cached == 14


class TestSweep:
    def test_single_zero(self, mix_profile):
        rows = sweep_lambda(mix_profile, [0.0], t_ref_steps=1000)
        assert len(rows) == 1 and rows[0].n_cached == 0
        assert rows[0].eval_ratio == 1.0 and rows[0].mse_vs_full == 0.0

    def test_zero_and_infinity_on_constant_residual_field(self):
        prof = log_ground_truth(make_prompts(AffinePlusIdentityField([0.3]), [0, 1]), 10)
        rows = sweep_lambda(prof, [0.0, math.inf], t_ref_steps=1000)
        assert [r.n_cached for r in rows] == [0, 8]

    def test_eval_ratio_nondecreasing(self, mix_profile):
        rows = sweep_lambda(mix_profile, [0, 0.05, 0.1, 0.2, 0.4], t_ref_steps=1000)
        ratios = [r.eval_ratio for r in rows]
        assert ratios == sorted(ratios)

    def test_grid_must_ascend(self, mix_profile):
        with pytest.raises(ValueError):
            sweep_lambda(mix_profile, [0.2, 0.1], t_ref_steps=1000)
        with pytest.raises(ValueError):
            sweep_lambda(mix_profile, [], t_ref_steps=1000)


class TestPersistence:
    def test_residual_dump_round_trip(self, tmp_path, rng):
        r = rng.normal(size=(5, 3))
        write_residuals_bin(tmp_path / "r.bin", r)
        raw = (tmp_path / "r.bin").read_bytes()
        assert raw[:4] == b"ERTA" and struct.unpack("<III", raw[4:16]) == (1, 5, 3)
        assert len(raw) == 16 + 8 * 15
        np.testing.assert_array_equal(read_residuals_bin(tmp_path / "r.bin"), r)

    def test_residual_dump_bad_magic(self, tmp_path):
        (tmp_path / "r.bin").write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(ValueError, match="magic"):
            read_residuals_bin(tmp_path / "r.bin")

    def test_residual_dump_truncated(self, tmp_path, rng):
        write_residuals_bin(tmp_path / "r.bin", rng.normal(size=(2, 2)))
        data = (tmp_path / "r.bin").read_bytes()
        (tmp_path / "r.bin").write_bytes(data[:-3])
        with pytest.raises(ValueError, match="expected"):
            read_residuals_bin(tmp_path / "r.bin")

    def test_profile_round_trip(self, tmp_path, mixture16):
        prof = log_ground_truth(make_prompts(mixture16, [7, 8]), 10)
        save_profile(prof, tmp_path / "p", full_vectors=True)
        manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
        assert manifest["format"] == "ertaprofile" and manifest["T"] == 10
        lines = (tmp_path / "p" / "prompt_0000.csv").read_text().splitlines()
        assert lines[0] == "step,l1,l2,linf" and len(lines) == 11
        back = load_profile(tmp_path / "p", mixture16)
        np.testing.assert_array_equal(back.residuals, prof.residuals)

    def test_profile_wrong_field(self, tmp_path, mixture16):
        prof = log_ground_truth(make_prompts(mixture16, [7]), 5)
        save_profile(prof, tmp_path / "p")
        with pytest.raises(ValueError, match="different field"):
            load_profile(tmp_path / "p", GaussianMixtureField.random(16, 3, seed=99))


def test_fixed_set_policy_threshold(mix_profile):
    art = collect_samples(mix_profile, [5, 10, 11])
    pol = build_policy(mix_profile, art, created="x")
    assert pol.provenance["cached_set"] == "fixed"
    assert pol.threshold == max(art.rel_l1_agg[30 - 1 - i] for i in (5, 10, 11))
