import math

import numpy as np
import pytest

from eowsoftmax.calibration import (
    OOD_THRESHOLDS,
    apply_temperature,
    corruption_sweep,
    ece,
    evaluate,
    evaluate_logits,
    nll,
    ood_threshold_accuracy,
    ood_threshold_rows,
    temperature_fit,
    write_threshold_table,
)
from eowsoftmax.model import EowClassifier, softmax


class TestEce:
    def test_hand_example(self):
        assert ece([0.6, 0.8], [True, False], n_bins=2).ece == 0.2

    def test_perfect_predictor(self):
        assert ece(np.ones(50), np.ones(50, dtype=bool)).ece == 0.0

    def test_within_bin_permutation(self):
        rng = np.random.default_rng(0)
        conf = rng.random(300)
        correct = rng.random(300) < conf
        base = ece(conf, correct).ece
        perm = rng.permutation(300)
        assert ece(conf[perm], correct[perm]).ece == base

    def test_bin_edges(self):
        r = ece([0.0, 1 / 15, 1.0], [0, 0, 1], n_bins=15)
        assert r.counts[0] == 1 and r.counts[1] == 1 and r.counts[14] == 1

    @pytest.mark.parametrize("seed", range(5))
    def test_bounded(self, seed):
        rng = np.random.default_rng(seed)
        v = ece(rng.random(100), rng.random(100) < 0.5).ece
        assert 0.0 <= v <= 1.0

    def test_reliability_csv(self, tmp_path):
        r = ece([0.1, 0.95, 0.97], [0, 1, 0], n_bins=5)
        r.write_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "bin_low,bin_high,count,avg_conf,avg_acc"
        assert len(lines) == 6
        rows = r.reliability_rows()
        assert rows[4][2] == 2 and rows[4][4] == 0.5
        assert math.isnan(rows[1][3])

    def test_errors(self):
        with pytest.raises(ValueError):
            ece([], [])
        with pytest.raises(ValueError):
            ece([1.2], [1])
        with pytest.raises(ValueError):
            ece([0.5, 0.5], [1])


class TestNll:
    def test_certain(self):
        assert nll(np.eye(3), [0, 1, 2]).value == 0.0

    def test_uniform(self):
        assert nll(np.full((4, 3), 1 / 3), [0, 1, 2, 0]).value == pytest.approx(np.log(3), abs=1e-15)

    def test_hand_pair(self):
        probs = np.array([[0.5, 0.5, 0.0], [0.25, 0.5, 0.25]])
        assert nll(probs, [0, 0]).value == (np.log(2) + np.log(4)) / 2

    def test_predicted_mode(self):
        probs = np.array([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]])
        r = nll(probs, None, "predicted", num_classes=2)
        assert r.value == pytest.approx(-(np.log(0.5) + np.log(0.6)) / 2, rel=1e-15)
        assert r.mode == "predicted"

    def test_clamp(self):
        r = nll(np.array([[1.0, 0.0]]), [1])
        assert r.value == pytest.approx(-np.log(1e-12)) and r.clamped == 1

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            nll(np.eye(2), [0, 1], mode="mean")


class TestTemperature:
    def _calibrated(self, seed=0, n=20000, k=5, scale=1.0):
        rng = np.random.default_rng(seed)
        logits = rng.normal(scale=2.0, size=(n, k))
        p = softmax(logits)
        labels = (rng.random(n)[:, None] < np.cumsum(p, axis=1)).argmax(axis=1)
        return scale * logits, labels

    def test_self_consistent(self):
        logits, labels = self._calibrated()
        assert temperature_fit(logits, labels) == pytest.approx(1.0, abs=0.1)

    def test_scale_equivariance(self):
        logits, labels = self._calibrated(1)
        t1 = temperature_fit(logits, labels)
        t2 = temperature_fit(2 * logits, labels)
        assert t2 == pytest.approx(2 * t1, rel=1e-3)

    def test_argmax_preserved(self):
        logits, labels = self._calibrated(2, n=500)
        for t in (0.1, 0.7, 3.0, temperature_fit(logits, labels)):
            np.testing.assert_array_equal(softmax(logits / t).argmax(axis=1), logits.argmax(axis=1))

    def test_closed_mode_keeps_extra_logit(self):
        logits = np.array([[2.0, 1.0, 5.0]])
        out = apply_temperature(logits, 2.0, "closed")
        np.testing.assert_array_equal(out, [[1.0, 0.5, 5.0]])
        np.testing.assert_array_equal(apply_temperature(logits, 2.0, "open"), logits / 2)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            temperature_fit(np.zeros((4, 3)), [1, 1, 1, 1])


class TestOodThresholds:
    def test_no_ood_perfect_classifier(self):
        rows = ood_threshold_rows(np.array([0.9, 0.8, 0.99]), np.ones(3, dtype=bool), np.array([]))
        assert [r.accuracy for r in rows] == [1.0] * 4

    def test_full_rejection_of_ood(self):
        in_conf = np.array([0.9, 0.3, 0.6, 0.2])
        in_correct = np.array([True, False, True, True])
        rows = ood_threshold_accuracy(in_conf, in_correct, np.array([0.1, 0.2, 0.24]))
        keep = in_conf > 0.25
        assert rows[1].accuracy == in_correct[keep].mean()
        assert rows[1].kept_ood == 0

    def test_hand_enumeration(self):
        in_conf = np.array([0.9, 0.6, 0.3, 0.2])
        in_correct = np.array([True, False, True, True])
        ood_conf = np.array([0.8, 0.4])
        rows = ood_threshold_accuracy(in_conf, in_correct, ood_conf)
        assert [r.threshold for r in rows] == [0.0, 0.25, 0.5, 0.75]
        assert [r.kept for r in rows] == [6, 5, 3, 2]
        assert [r.accuracy for r in rows] == [3 / 6, 2 / 5, 1 / 3, 1 / 2]

    def test_tau_zero_is_combined_accuracy(self):
        rng = np.random.default_rng(0)
        in_conf, ood_conf = rng.random(40) + 1e-9, rng.random(17) + 1e-9
        correct = rng.random(40) < 0.7
        rows = ood_threshold_accuracy(in_conf, correct, ood_conf)
        assert rows[0].accuracy == correct.sum() / 57

    def test_empty_kept_is_undefined(self, tmp_path):
        rows = ood_threshold_accuracy([0.2], [True], [0.1])
        assert rows[-1].accuracy is None
        write_threshold_table(rows, tmp_path / "t.csv", tmp_path / "t.json")
        assert (tmp_path / "t.csv").read_text().splitlines()[-1].endswith("undefined")

    def test_default_thresholds(self):
        assert OOD_THRESHOLDS == (0.0, 0.25, 0.5, 0.75)


class TestEvaluate:
    def _model(self):
        return EowClassifier([4, 8], 3, rng=np.random.default_rng(0))

    def test_matches_direct_metrics(self):
        m = self._model()
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(60, 4)), rng.integers(0, 3, 60)
        ev = evaluate(m, x, y)
        label, conf, _ = m.predict(x)
        assert ev.accuracy == np.mean(label == y)
        assert ev.ece.ece == ece(conf, label == y).ece
        assert ev.nll_true.value == nll(m.probs(x), y).value

    def test_closed_mode_scores_k_way(self):
        logits = np.array([[2.0, 0.0, 9.0]])
        ev = evaluate_logits(logits, [0], "closed")
        assert ev.nll_true.value == pytest.approx(np.log(1 + np.exp(-2.0)), rel=1e-14)

    def test_uniform_nll_is_log_k_plus_one(self):
        m = self._model()
        m.theta[:] = 0.0
        x = np.ones((5, 4))
        assert abs(evaluate(m, x, [0, 1, 2, 0, 1]).nll_true.value - np.log(4)) <= 1e-12


class TestCorruptionSweep:
    def _setup(self):
        m = EowClassifier([6, 8], 2, rng=np.random.default_rng(0))
        rng = np.random.default_rng(1)
        return m, rng.random((80, 6)), rng.integers(0, 2, 80)

    def test_empty_severities(self):
        m, x, y = self._setup()
        assert corruption_sweep(m, x, y, ["gaussian_noise"], severities=()) == []

    def test_identity_equals_clean(self):
        m, x, y = self._setup()
        rows = corruption_sweep(m, x, y, ["identity"], severities=(0,))
        assert rows[0].mean_ece == evaluate(m, x, y).ece.ece
        assert rows[0].std_ece == 0.0

    def test_deterministic(self):
        m, x, y = self._setup()
        a = corruption_sweep(m, x, y, ["gaussian_noise", "pixel_dropout", "contrast"], seed=3)
        b = corruption_sweep(m, x, y, ["gaussian_noise", "pixel_dropout", "contrast"], seed=3)
        assert [r.per_type for r in a] == [r.per_type for r in b]
        assert [r.severity for r in a] == [1, 2, 3, 4, 5]
