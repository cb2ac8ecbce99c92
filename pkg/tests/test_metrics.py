import math

import numpy as np
import pytest

from tsgan import metrics as M
from tsgan.errors import ContractError, ShapeError


def hist_from_probs(probs):
    probs = np.asarray(probs, dtype=float)
    edges = np.linspace(0.0, 1.0, len(probs) + 1)
    return M.Histogram(edges=edges, counts=probs * 1000, probs=probs)


class TestHistogram:
    def test_point_mass(self):
        h = M.histogram_estimate(np.full(100, 0.5), bins=10, value_range=(0.0, 1.0))
        assert h.probs.argmax() == 5
        assert h.probs.max() > 0.999
        assert np.all(h.probs > 0)

    def test_uniform_binomial_error(self):
        rng = np.random.default_rng(0)
        h = M.histogram_estimate(rng.uniform(size=10**6), bins=50, value_range=(0.0, 1.0))
        assert np.all(np.abs(h.probs - 0.02) < 0.005)

    def test_order_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=1000)
        a = M.histogram_estimate(x, value_range=(-4, 4))
        b = M.histogram_estimate(x[::-1], value_range=(-4, 4))
        assert np.array_equal(a.counts, b.counts)

    def test_upper_edge_in_last_bin(self):
        h = M.histogram_estimate(np.array([0.0, 1.0]), bins=4, value_range=(0.0, 1.0))
        assert h.counts[-1] == 1

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            M.histogram_estimate(np.array([]))

    def test_probs_sum_to_one(self):
        rng = np.random.default_rng(2)
        h = M.histogram_estimate(rng.normal(size=500))
        assert abs(h.probs.sum() - 1.0) < 1e-12


class TestKld:
    def test_identity(self):
        p = hist_from_probs([0.3, 0.7])
        assert M.kld(p, p) == 0.0

    def test_hand_case(self):
        p = hist_from_probs([0.5, 0.5])
        q = hist_from_probs([0.25, 0.75])
        expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        assert M.kld(p, q) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.1438, abs=1e-4)

    def test_asymmetry(self):
        p = hist_from_probs([0.5, 0.5])
        q = hist_from_probs([0.25, 0.75])
        reverse = 0.25 * math.log(0.5) + 0.75 * math.log(1.5)
        assert M.kld(q, p) == pytest.approx(reverse, abs=1e-12)
        assert M.kld(p, q) != M.kld(q, p)

    def test_nonnegative_random_pairs(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            a = rng.uniform(0.01, 1.0, size=20)
            b = rng.uniform(0.01, 1.0, size=20)
            assert M.kld(hist_from_probs(a / a.sum()), hist_from_probs(b / b.sum())) >= 0.0

    def test_mismatched_edges_rejected(self):
        p = hist_from_probs([0.5, 0.5])
        q = M.Histogram(edges=np.array([0.0, 2.0, 4.0]), counts=p.counts, probs=p.probs)
        with pytest.raises(ContractError):
            M.kld(p, q)


class TestJsd:
    def _batch(self, values):
        return np.asarray(values, dtype=float).reshape(-1, 24, 1)

    def test_identical_is_zero(self):
        rng = np.random.default_rng(4)
        x = self._batch(rng.normal(size=24 * 50))
        assert M.jsd(x, x).mean < 1e-12

    def test_disjoint_supports_reach_ln2(self):
        rng = np.random.default_rng(5)
        a = self._batch(rng.uniform(0.0, 1.0, size=24 * 100))
        b = self._batch(rng.uniform(2.0, 3.0, size=24 * 100))
        assert M.jsd(a, b).mean == pytest.approx(math.log(2.0), abs=1e-6)

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            a = self._batch(rng.normal(size=24 * 30))
            b = self._batch(rng.normal(loc=rng.uniform(-2, 2), size=24 * 30))
            ab = M.jsd(a, b).mean
            ba = M.jsd(b, a).mean
            assert ab == pytest.approx(ba, abs=1e-12)
            assert -1e-12 <= ab <= math.log(2.0) + 1e-8

    def test_per_channel_keys(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(10, 24, 2))
        result = M.jsd(a, a + 0.1)
        assert set(result.per_channel) == {"ch0", "ch1"}
        assert result.mean == pytest.approx(np.mean(list(result.per_channel.values())))


class TestMae:
    def test_zero_for_equal(self):
        assert M.mae([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_hand_case(self):
        assert M.mae([1.0, 2.0], [2.0, 4.0]) == 1.5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            M.mae(np.zeros(3), np.zeros(4))

    def test_translation_detecting(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=100)
        for c in (0.5, -2.0, 3.3):
            assert M.mae(x + c, x) == pytest.approx(abs(c), rel=1e-12)


class TestPeakMetrics:
    def test_all_below_threshold(self):
        obs = np.ones(100)
        pred = obs + 0.5
        pm = M.peak_event_metrics(pred, obs, 0.95)
        assert pm.peak_mae is None and pm.peak_bias is None
        assert pm.dry_mae == pytest.approx(M.mae(pred, obs))

    def test_constant_underestimation_bias(self):
        rng = np.random.default_rng(9)
        obs = np.concatenate([rng.uniform(0, 1, size=95), np.full(5, 10.0)])
        pred = obs.copy()
        pred[obs > 5] -= 2.0
        pm = M.peak_event_metrics(pred, obs, 0.95)
        assert pm.peak_bias == pytest.approx(-2.0)
        assert pm.peak_mae == pytest.approx(2.0)

    def test_masks_partition(self):
        rng = np.random.default_rng(10)
        obs = rng.exponential(size=500)
        pm = M.peak_event_metrics(obs, obs, 0.9)
        assert pm.peak_count + pm.dry_count == 500
