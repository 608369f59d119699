import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from dfkd.engine import Rng
from dfkd.errors import ConfigError, ContractError, ShapeError
from dfkd.metrics import (FeatureExtractor, FeatureStats, ImageDetections, accuracy_confusion,
                          extract_features, feature_stats, fid, interpolated_ap, matrix_sqrt_psd,
                          mean_average_precision)

from oracles import ap_bruteforce


def _random_psd(rng, d, rank=None):
    a = rng.normal(size=(d, rank or d))
    return a @ a.T


def _random_stats(rng, d):
    return FeatureStats(rng.normal(size=d), _random_psd(rng, d), 100)


class TestFeatureStats:
    def test_identical_rows(self):
        s = feature_stats(np.tile([1.0, -2.0, 3.0], (5, 1)))
        np.testing.assert_array_equal(s.cov, np.zeros((3, 3)))

    def test_two_points(self):
        s = feature_stats([[0.0, 0.0], [2.0, 2.0]])
        np.testing.assert_array_equal(s.mean, [1.0, 1.0])
        np.testing.assert_array_equal(s.cov, [[2.0, 2.0], [2.0, 2.0]])

    def test_monte_carlo(self):
        rng = np.random.default_rng(0)
        mu = np.array([1.0, -1.0, 0.5])
        cov = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 0.5]])
        s = feature_stats(rng.multivariate_normal(mu, cov, size=200_000))
        np.testing.assert_allclose(s.mean, mu, atol=0.02)
        np.testing.assert_allclose(s.cov, cov, atol=0.03)

    def test_unbiased_divisor(self):
        x = np.random.default_rng(1).normal(size=(7, 3))
        np.testing.assert_allclose(feature_stats(x).cov, np.cov(x, rowvar=False), atol=1e-14)

    def test_single_row(self):
        with pytest.raises(ContractError):
            feature_stats([[1.0, 2.0]])


class TestMatrixSqrt:
    def test_identity(self):
        np.testing.assert_allclose(matrix_sqrt_psd(np.eye(4)), np.eye(4), atol=1e-15)

    def test_diagonal(self):
        np.testing.assert_allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)

    @pytest.mark.parametrize("seed", range(20))
    def test_defining_property(self, seed):
        rng = np.random.default_rng(seed)
        m = _random_psd(rng, int(rng.integers(2, 12)))
        s = matrix_sqrt_psd(m)
        assert np.linalg.norm(s @ s - m) / np.linalg.norm(m) < 1e-8
        np.testing.assert_array_equal(s, s.T)
        assert np.linalg.eigvalsh(s).min() > -1e-8

    def test_agrees_with_scipy(self):
        m = _random_psd(np.random.default_rng(3), 6)
        np.testing.assert_allclose(matrix_sqrt_psd(m), scipy.linalg.sqrtm(m).real, atol=1e-9)

    def test_rank_deficient_clamps(self):
        m = _random_psd(np.random.default_rng(4), 6, rank=2)
        s = matrix_sqrt_psd(m)
        assert np.linalg.norm(s @ s - m) / np.linalg.norm(m) < 1e-8

    def test_asymmetric(self):
        with pytest.raises(ContractError):
            matrix_sqrt_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestFid:
    def test_self_is_zero(self):
        s = _random_stats(np.random.default_rng(0), 8)
        assert abs(fid(s, s)) < 1e-9

    def test_mean_shift(self):
        a = FeatureStats(np.zeros(2), np.eye(2), 10)
        b = FeatureStats(np.array([3.0, 4.0]), np.eye(2), 10)
        assert fid(a, b) == pytest.approx(25.0, abs=1e-6)

    def test_scaled_covariance(self):
        a = FeatureStats(np.zeros(2), 4 * np.eye(2), 10)
        b = FeatureStats(np.zeros(2), np.eye(2), 10)
        assert fid(a, b) == pytest.approx(2.0, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_direct_product_sqrt(self, seed):
        rng = np.random.default_rng(seed)
        a, b = _random_stats(rng, 5), _random_stats(rng, 5)
        cross = np.trace(scipy.linalg.sqrtm(a.cov @ b.cov)).real
        ref = np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov + b.cov) - 2 * cross
        assert fid(a, b) == pytest.approx(ref, rel=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8))
    def test_symmetric_and_nonnegative(self, seed, d):
        rng = np.random.default_rng(seed)
        a, b = _random_stats(rng, d), _random_stats(rng, d)
        assert abs(fid(a, b) - fid(b, a)) < 1e-9 * max(1.0, fid(a, b))
        assert fid(a, b) >= 0.0
        assert abs(fid(a, a)) < 1e-9 * max(1.0, np.trace(a.cov))

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ShapeError):
            fid(_random_stats(rng, 2), _random_stats(rng, 3))


class TestAccuracy:
    def test_all_correct(self):
        acc, conf = accuracy_confusion([0, 1, 2, 2], [0, 1, 2, 2], 3)
        assert acc == 1.0
        np.testing.assert_array_equal(conf, np.diag([1, 1, 2]))

    def test_all_zero(self):
        _, conf = accuracy_confusion([0, 0, 0, 0], [0, 1, 2, 1], 3)
        np.testing.assert_array_equal(conf, [[1, 0, 0], [2, 0, 0], [1, 0, 0]])

    def test_hand_tally(self):
        rng = np.random.default_rng(5)
        pred, true = rng.integers(0, 3, 20), rng.integers(0, 3, 20)
        tally = np.zeros((3, 3), dtype=int)
        for t, p in zip(true, pred):
            tally[t][p] += 1
        acc, conf = accuracy_confusion(pred, true, 3)
        np.testing.assert_array_equal(conf, tally)
        assert acc == sum(int(t == p) for t, p in zip(true, pred)) / 20

    def test_empty(self):
        with pytest.raises(ContractError):
            accuracy_confusion([], [], 3)


BOX = [0.0, 0.0, 10.0, 10.0]


class TestMap:
    def test_perfect(self):
        r = mean_average_precision([ImageDetections.make([0], [1.0], [BOX], [0], [BOX])])
        assert r.map == 1.0 and r.per_class == {0: 1.0}

    def test_no_predictions(self):
        r = mean_average_precision([ImageDetections.make(gt_classes=[0], gt_boxes=[BOX])])
        assert r.map == 0.0

    def test_nothing_at_all(self):
        assert mean_average_precision([ImageDetections.make()]).map == 0.0

    def test_prediction_without_ground_truth(self):
        r = mean_average_precision([ImageDetections.make([0, 1], [0.9, 0.8], [BOX, BOX], [0], [BOX])])
        assert r.per_class == {0: 1.0, 1: 0.0} and r.no_ground_truth == [1] and r.map == 0.5

    def test_three_predictions_two_gts(self):
        gts = [[0, 0, 10, 10], [20, 20, 30, 30]]
        preds = [[0, 0, 10, 10], [21, 21, 31, 31], [0, 0, 9, 10]]
        scores = [0.9, 0.6, 0.8]
        r = mean_average_precision([ImageDetections.make([0, 0, 0], scores, preds, [0, 0], gts)])
        # order: TP (0.9), FP duplicate (0.8), TP (0.6, IoU 81/119): P = 1, 1/2, 2/3 at R = .5, .5, 1
        expected = (51 * 1.0 + 50 * (2 / 3)) / 101
        assert r.map == pytest.approx(expected, abs=1e-12)
        oracle = ap_bruteforce([(0, s, b) for s, b in zip(scores, preds)], [(0, g) for g in gts], 0.5)
        assert r.map == pytest.approx(oracle, abs=1e-12)

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        results, preds, gts = [], [], []
        for img in range(int(rng.integers(1, 4))):
            g = rng.integers(0, 3)
            gb = [_rand_box(rng) for _ in range(g)]
            pb = [_jitter(rng, b) for b in gb for _ in range(int(rng.integers(0, 3)))]
            pb += [_rand_box(rng) for _ in range(int(rng.integers(0, 3)))]
            sc = list(rng.random(len(pb)))
            results.append(ImageDetections.make([0] * len(pb), sc, pb, [0] * g, gb))
            preds += [(img, s, b) for s, b in zip(sc, pb)]
            gts += [(img, b) for b in gb]
        r = mean_average_precision(results)
        if not gts or not preds:
            assert r.map == 0.0
            return
        assert r.map == pytest.approx(ap_bruteforce(preds, gts, 0.5), abs=1e-12)
        assert 0.0 <= r.map <= 1.0

    @pytest.mark.parametrize("seed", range(25))
    def test_adding_correct_detection_is_monotone(self, seed):
        rng = np.random.default_rng(100 + seed)
        gts = [_rand_box(rng, offset=40 * k) for k in range(4)]
        n_pred = int(rng.integers(0, 4))
        pb = [_jitter(rng, gts[k]) for k in range(n_pred)] + [_rand_box(rng) for _ in range(2)]
        sc = list(rng.random(len(pb)))
        base = mean_average_precision([ImageDetections.make([0] * len(pb), sc, pb, [0] * 4, gts)])
        pb2 = pb + [gts[3]]
        sc2 = sc + [float(rng.random())]
        more = mean_average_precision([ImageDetections.make([0] * len(pb2), sc2, pb2, [0] * 4, gts)])
        assert more.per_class[0] >= base.per_class[0] - 1e-12

    def test_interpolation_envelope(self):
        # precision dips then recovers; the envelope takes the later, higher value
        ap = interpolated_ap(np.array([0.5, 0.5, 1.0]), np.array([1.0, 0.5, 2 / 3]))
        assert ap == pytest.approx((51 + 50 * 2 / 3) / 101)

    def test_threshold_domain(self):
        with pytest.raises(ContractError):
            mean_average_precision([], iou_threshold=1.0)


def _rand_box(rng, offset=0.0):
    x, y = rng.uniform(0, 30, 2) + offset
    w, h = rng.uniform(4, 12, 2)
    return [x, y, x + w, y + h]


def _jitter(rng, b):
    d = rng.normal(scale=1.0, size=4)
    return [b[0] + d[0], b[1] + d[1], max(b[0] + d[0] + 1, b[2] + d[2]), max(b[1] + d[1] + 1, b[3] + d[3])]


class TestExtractor:
    def test_shape_and_determinism(self):
        ext = FeatureExtractor(feature_dim=24, rng=Rng(0))
        imgs = np.random.default_rng(0).uniform(-1, 1, (5, 1, 16, 16))
        a = extract_features(ext, imgs)
        assert a.shape == (5, 24)
        np.testing.assert_array_equal(a, extract_features(ext, imgs.copy()))

    def test_missing_extractor(self):
        with pytest.raises(ConfigError, match="train-fid-extractor"):
            extract_features(None, np.zeros((2, 1, 16, 16)))
