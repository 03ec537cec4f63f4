import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridact.ar_head import (ARDecodeResult, NormStats, ar_targets, bin_value,
                               debin_value, decode_result, denormalize,
                               greedy_decode_bins, normalize)


@pytest.fixture
def stats():
    return NormStats(low=np.array([-0.1, -0.2, 0.0, -1.0]), high=np.array([0.1, 0.2, 1.0, 1.0]))


class TestNormStats:
    def test_degenerate_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            NormStats(low=np.array([0.0, 1.0]), high=np.array([1.0, 1.0]))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            NormStats(low=np.array([np.nan]), high=np.array([1.0]))

    def test_from_actions_margin(self, rng):
        acts = rng.uniform(-0.5, 0.5, size=(100, 3))
        stats = NormStats.from_actions(acts)
        span = acts.max(axis=0) - acts.min(axis=0)
        np.testing.assert_allclose(stats.low, acts.min(axis=0) - 0.01 * span)
        np.testing.assert_allclose(stats.high, acts.max(axis=0) + 0.01 * span)


class TestNormalize:
    def test_bounds_map_to_unit(self, stats):
        np.testing.assert_allclose(normalize(stats.low, stats), -np.ones(4))
        np.testing.assert_allclose(normalize(stats.high, stats), np.ones(4))

    def test_midpoint_maps_to_zero(self, stats):
        mid = (stats.low + stats.high) / 2
        np.testing.assert_allclose(normalize(mid, stats), np.zeros(4), atol=1e-12)

    def test_roundtrip(self, stats, rng):
        for _ in range(20):
            v = rng.uniform(stats.low, stats.high)
            np.testing.assert_allclose(denormalize(normalize(v, stats), stats), v, atol=1e-6)

    def test_out_of_range_clipped(self, stats):
        v = stats.high + 1.0
        np.testing.assert_allclose(normalize(v, stats), np.ones(4))


class TestBinning:
    def test_boundaries(self):
        assert bin_value(np.array(-1.0)) == 0
        assert bin_value(np.array(1.0)) == 255
        assert bin_value(np.array(0.0)) == 128

    def test_debin_values(self):
        assert debin_value(np.array(128)) == pytest.approx(0.00390625)
        assert debin_value(np.array(0)) == pytest.approx(-0.99609375)

    def test_exhaustive_centers(self):
        ids = np.arange(256)
        centers = debin_value(ids)
        np.testing.assert_array_equal(bin_value(centers), ids)

    def test_roundtrip_error_bound(self, rng):
        v = rng.uniform(-1, 1, size=10_000)
        err = np.abs(debin_value(bin_value(v)) - v)
        assert err.max() <= 1 / 256

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            bin_value(np.array([np.inf]))

    def test_debin_range_check(self):
        with pytest.raises(ValueError):
            debin_value(np.array([256]))


class TestARTargets:
    def test_midpoint_targets(self, stats):
        mid = (stats.low + stats.high) / 2
        np.testing.assert_array_equal(ar_targets(mid, stats), np.full(4, 128))

    def test_dual_arm_count(self):
        stats = NormStats(low=-np.ones(14), high=np.ones(14))
        assert ar_targets(np.zeros(14), stats).shape == (14,)

    def test_identity_on_bin_centers(self, stats):
        # denormalized bin centers rebin to the same ids, for every bin
        for dim in range(4):
            centers = denormalize(debin_value(np.arange(256)),
                                  NormStats(low=stats.low[dim:dim + 1],
                                            high=stats.high[dim:dim + 1]))
            sub = NormStats(low=stats.low[dim:dim + 1], high=stats.high[dim:dim + 1])
            ids = np.array([ar_targets(np.array([c]), sub)[0] for c in centers])
            np.testing.assert_array_equal(ids, np.arange(256))


def constant_logits_fn(logits):
    return lambda step, prev: logits


class TestGreedyDecode:
    def test_forced_one_hot_confidence_one(self):
        logits = np.full(325, -1e9)
        logits[64 + 17] = 1e9
        ids, probs = greedy_decode_bins(constant_logits_fn(logits), 7, 64)
        assert (ids == 17).all()
        assert probs.mean() == pytest.approx(1.0)

    def test_uniform_confidence(self):
        ids, probs = greedy_decode_bins(constant_logits_fn(np.zeros(325)), 7, 64)
        assert probs.mean() == pytest.approx(1 / 256)

    def test_shift_invariance(self, rng):
        logits = rng.normal(size=325)
        ids1, p1 = greedy_decode_bins(constant_logits_fn(logits), 7, 64)
        ids2, p2 = greedy_decode_bins(constant_logits_fn(logits + 100.0), 7, 64)
        np.testing.assert_array_equal(ids1, ids2)
        np.testing.assert_allclose(p1, p2, atol=1e-9)

    def test_never_emits_out_of_range(self, rng):
        # huge logits outside the bin range must be masked away
        logits = rng.normal(size=325)
        logits[:64] = 1e8
        logits[320:] = 1e8
        ids, _ = greedy_decode_bins(constant_logits_fn(logits), 7, 64)
        assert (ids >= 0).all() and (ids < 256).all()

    def test_confidence_grows_with_margin(self):
        base = np.zeros(325)
        confidences = []
        for margin in (0.5, 1.0, 2.0, 4.0):
            logits = base.copy()
            logits[64 + 9] = margin
            _, probs = greedy_decode_bins(constant_logits_fn(logits), 3, 64)
            confidences.append(probs.mean())
        assert all(a < b for a, b in zip(confidences, confidences[1:]))

    def test_decode_result_denormalizes(self, stats):
        ids = np.array([0, 128, 255, 64])
        res = decode_result(ids, np.full(4, 0.5), stats)
        assert isinstance(res, ARDecodeResult)
        np.testing.assert_allclose(res.pose, denormalize(debin_value(ids), stats))
        assert res.confidence == pytest.approx(0.5)
        assert 0.0 <= res.confidence <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1))
def test_quantization_error_property(v):
    arr = np.array([v])
    err = np.abs(debin_value(bin_value(arr)) - arr).max()
    assert err <= 1 / 256 + 1e-12
