from __future__ import annotations

import numpy as np
import pytest
from sklearn.metrics import average_precision_score

from split_ensemble.evaluation import (MetricsReport, aupr, auroc, detection_error,
                                       fpr_detection_error, gen_noise_ood, mean_report,
                                       ood_metrics, threshold_at_tpr)


def brute_auroc(ids, oods):
    wins = sum((a > b) + 0.5 * (a == b) for a in ids for b in oods)
    return wins / (len(ids) * len(oods))


class TestThreshold:
    def test_order_statistic(self):
        assert threshold_at_tpr(np.arange(1, 11) / 10, 0.95) == 0.1
        assert threshold_at_tpr(np.arange(1, 11) / 10, 0.9) == 0.2

    def test_full_tpr_is_min(self, rng):
        s = rng.random(37)
        assert threshold_at_tpr(s, 1.0) == s.min()

    def test_constant(self):
        assert threshold_at_tpr(np.full(9, 0.3), 0.95) == 0.3

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            threshold_at_tpr([], 0.95)
        with pytest.raises(ValueError):
            threshold_at_tpr([0.5], 0.0)


class TestDetectionError:
    def test_table_row(self):
        # FPR 56.9% at 95% TPR is reported with detection error 30.9%
        assert detection_error(0.569, 0.95) == pytest.approx(0.3095, abs=1e-12)
        assert abs(100 * detection_error(0.569, 0.95) - 30.9) <= 0.1

    def test_extremes(self):
        assert detection_error(0.0, 0.95) == pytest.approx(0.025)
        assert detection_error(1.0, 0.95) == pytest.approx(0.525)

    def test_from_scores(self):
        ids = np.arange(1, 21) / 20.0  # threshold 0.1 keeps 19 of 20
        oods = np.r_[np.full(569, 0.5), np.full(431, 0.01)]
        fpr, det = fpr_detection_error(ids, oods)
        assert fpr == 0.569
        assert det == pytest.approx(0.3095, abs=1e-12)

    def test_uses_achieved_tpr(self):
        ids = np.array([0.2, 0.2, 0.2, 0.9])  # any threshold <= 0.2 keeps all four
        fpr, det = fpr_detection_error(ids, np.array([0.1]), 0.5)
        assert fpr == 0.0 and det == 0.0


class TestAUROC:
    def test_examples(self):
        assert auroc([0.9, 0.8], [0.85, 0.1]) == 0.75
        assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0
        assert auroc(np.full(5, 0.4), np.full(3, 0.4)) == 0.5

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            ids = rng.integers(0, 10, rng.integers(1, 51)) / 10.0
            oods = rng.integers(0, 10, rng.integers(1, 51)) / 10.0
            assert auroc(ids, oods) == brute_auroc(ids, oods)

    def test_monotone_invariance(self, rng):
        ids, oods = rng.normal(1, 1, 200), rng.normal(0, 1, 300)
        f = lambda s: np.exp(3 * s) + 2  # noqa: E731
        assert auroc(f(ids), f(oods)) == pytest.approx(auroc(ids, oods), abs=1e-15)
        assert fpr_detection_error(f(ids), f(oods)) == fpr_detection_error(ids, oods)

    def test_empty(self):
        with pytest.raises(ValueError):
            auroc([], [0.1])


class TestAUPR:
    def test_matches_sklearn(self, rng):
        for _ in range(30):
            ids = rng.integers(0, 8, rng.integers(1, 40)) / 8.0
            oods = rng.integers(0, 8, rng.integers(1, 40)) / 8.0
            labels = np.r_[np.ones(ids.size), np.zeros(oods.size)]
            scores = np.r_[ids, oods]
            assert aupr(ids, oods) == pytest.approx(average_precision_score(labels, scores))
            assert aupr(ids, oods, "ood") == pytest.approx(
                average_precision_score(1 - labels, -scores))

    def test_perfect(self):
        assert aupr([0.9, 0.8], [0.1]) == 1.0

    def test_bad_positive(self):
        with pytest.raises(ValueError):
            aupr([1.0], [0.0], "both")


def test_report_and_mean():
    r = ood_metrics([0.9, 0.8], [0.85, 0.1], accuracy=0.5)
    assert r.auroc == 0.75 and r.accuracy == 0.5
    assert all(0.0 <= v <= 1.0 for v in r.to_dict().values())
    assert r.to_dict(percent=True)["auroc"] == 75.0
    m = mean_report([MetricsReport(auroc=0.5), MetricsReport(auroc=1.0, accuracy=0.2)])
    assert m.auroc == 0.75 and m.accuracy == 0.2 and m.aupr is None


class TestNoise:
    def test_deterministic(self):
        a = gen_noise_ood("gaussian", (3, 4, 4), 10, seed=7)
        assert a.tobytes() == gen_noise_ood("gaussian", (3, 4, 4), 10, seed=7).tobytes()
        assert a.tobytes() != gen_noise_ood("gaussian", (3, 4, 4), 10, seed=8).tobytes()

    def test_uniform_mean(self):
        x = gen_noise_ood("uniform", (1, 10, 10), 100, seed=0)
        assert x.dtype == np.float32 and x.shape == (100, 1, 10, 10)
        assert abs(float(x.mean()) - 0.5) < 0.01

    def test_gaussian_clipped(self):
        x = gen_noise_ood("gaussian", (1, 32, 32), 50, seed=1)
        assert x.min() >= 0.0 and x.max() <= 1.0
        assert abs(float(x.mean()) - 0.5) < 0.01

    def test_errors(self):
        with pytest.raises(ValueError):
            gen_noise_ood("salt", (1, 2, 2), 3)
        with pytest.raises(ValueError):
            gen_noise_ood("uniform", (1, 2, 2), 0)
