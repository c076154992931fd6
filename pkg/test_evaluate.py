"""
Tests for per-event error metrics, the paired signed-rank test and the
latency benchmark.
"""
import itertools
import os
import sys
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from scipy.stats import rankdata

# Add the parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from force2kin.asl import AslConfig
from force2kin.data import Dataset, Event, Normalizer, WindowSpec
from force2kin.errors import ConfigError, DataError, DimensionError
from force2kin.evaluate import (
    aggregate,
    bench_latency,
    evaluate_model,
    event_mae,
    param_sweep,
    predict_event,
    wilcoxon_signed_rank,
)
from force2kin.seq2seq import ModelConfig, build_model
from force2kin.tensor_core import make_rng


def enumerated_p_greater(d):
    """P(W+ >= observed) by listing every sign assignment."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    observed = ranks[d > 0].sum()
    hits = 0
    total = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        total += 1
        if ranks[np.array(signs, dtype=bool)].sum() >= observed - 1e-9:
            hits += 1
    return hits / total


def last_sample_model(feature_win=4, channels=3):
    """Linear model whose output is the last force sample of the window."""
    cfg = ModelConfig(model_class_name="Linear", input_size=channels, feature_win=feature_win, dec_output_size=channels)
    model = build_model(cfg, 0)
    model.fc.weight.value[...] = 0.0
    model.fc.bias.value[...] = 0.0
    for c in range(channels):
        model.fc.weight.value[(feature_win - 1) * channels + c, c] = 1.0
    return model


class TestMetrics(unittest.TestCase):
    def test_event_mae(self):
        self.assertEqual(event_mae(np.zeros((4, 3)), np.ones((4, 3))), 1.0)
        self.assertAlmostEqual(event_mae(np.array([[0.0, 0.0, 0.3]]), np.zeros((1, 3))), 0.1)
        with self.assertRaises(DimensionError):
            event_mae(np.zeros((4, 3)), np.zeros((4, 2)))

    def test_aggregate(self):
        self.assertAlmostEqual(aggregate([1.0, 2.0, 10.0], "mean"), 13 / 3)
        self.assertEqual(aggregate([1.0, 2.0, 10.0], "median"), 2.0)
        self.assertEqual(aggregate([1.0, 2.0, 3.0, 10.0]), 2.5)

    def test_aggregate_errors(self):
        with self.assertRaises(DataError):
            aggregate([])
        with self.assertRaises(ConfigError):
            aggregate([1.0], "mode")


class TestWilcoxon(unittest.TestCase):
    def test_three_positive_differences(self):
        result = wilcoxon_signed_rank([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        self.assertEqual(result.statistic, 6.0)
        self.assertEqual(result.method, "exact")
        self.assertAlmostEqual(result.p_greater, 0.125)
        self.assertAlmostEqual(result.p_less, 1.0)
        self.assertAlmostEqual(result.p_two_sided, 0.25)

    def test_identical_samples_are_degenerate(self):
        result = wilcoxon_signed_rank([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
        self.assertTrue(result.degenerate)
        self.assertEqual(result.n, 0)
        self.assertEqual(result.p_two_sided, 1.0)

    def test_zero_differences_are_dropped(self):
        result = wilcoxon_signed_rank([1.0, 2.0, 3.0, 5.0], [0.0, 0.0, 0.0, 5.0])
        self.assertEqual(result.n, 3)
        self.assertAlmostEqual(result.p_greater, 0.125)

    def test_exact_matches_enumeration(self):
        rng = make_rng(0)
        for n in (4, 7, 10):
            for trial in range(3):
                d = np.round(rng.standard_normal(n), 1)
                if not np.any(d):
                    continue
                result = wilcoxon_signed_rank(d, np.zeros(n), exact=True)
                self.assertAlmostEqual(result.p_greater, enumerated_p_greater(d), places=12, msg=f"n={n}")
                self.assertAlmostEqual(result.p_less, enumerated_p_greater(-d), places=12, msg=f"n={n}")

    def test_normal_approximation_close_to_exact(self):
        d = make_rng(1).standard_normal(20) + 0.3
        exact = wilcoxon_signed_rank(d, np.zeros(20), exact=True)
        approx = wilcoxon_signed_rank(d, np.zeros(20))
        self.assertEqual(approx.method, "normal")
        self.assertLess(abs(exact.p_two_sided - approx.p_two_sided), 0.02)

    def test_swapping_samples_swaps_tails(self):
        rng = make_rng(2)
        a = rng.standard_normal(8)
        b = rng.standard_normal(8)
        forward = wilcoxon_signed_rank(a, b)
        backward = wilcoxon_signed_rank(b, a)
        self.assertAlmostEqual(forward.p_greater, backward.p_less)
        self.assertAlmostEqual(forward.p_two_sided, backward.p_two_sided)

    def test_unpaired_lengths(self):
        with self.assertRaises(DimensionError):
            wilcoxon_signed_rank([1.0, 2.0], [1.0])


class TestEvaluateModel(unittest.TestCase):
    def setUp(self):
        rng = make_rng(3)
        self.identity = Normalizer.fit([np.zeros((2, 3)), np.ones((2, 3))], "identity")
        events = []
        for i, offset in enumerate((0.0, 0.5, 0.25)):
            forces = rng.standard_normal((12, 3))
            events.append(Event(f"e{i}", 10.0, forces, forces + offset))
        events.append(Event("short", 10.0, np.zeros((2, 3)), np.zeros((2, 3))))
        self.dataset = Dataset(events, ["F1", "F2", "F3"], sample_rate=10.0)

    def test_per_event_errors(self):
        report = evaluate_model(last_sample_model(), self.dataset, WindowSpec(4), self.identity, self.identity)
        self.assertEqual(report.event_ids, ["e0", "e1", "e2"])
        assert_allclose(report.maes, [0.0, 0.5, 0.25], atol=1e-12)
        assert_allclose(report.per_angle[1], [0.5, 0.5, 0.5], atol=1e-12)
        self.assertAlmostEqual(report.median, 0.25)
        self.assertAlmostEqual(report.mean, 0.25)
        frame = report.to_frame()
        self.assertEqual(list(frame.columns), ["event_id", "mae", "mae_phi", "mae_theta", "mae_psi"])

    def test_predictions_are_in_target_units(self):
        event = self.dataset.events[1]
        targets = Normalizer.fit([event.kinematics], "zscore")
        pred, truth = predict_event(last_sample_model(), event.forces, event.kinematics, WindowSpec(4),
                                    self.identity, targets)
        self.assertEqual(pred.shape, (9, 1, 3))
        assert_allclose(pred[:, 0], targets.invert(event.forces[3:]), atol=1e-12)
        assert_array_equal(truth[:, 0], event.kinematics[3:])

    def test_nothing_to_evaluate(self):
        short = Dataset([self.dataset.events[-1]], ["F1", "F2", "F3"], sample_rate=10.0)
        with self.assertRaises(DataError):
            evaluate_model(last_sample_model(), short, WindowSpec(4), self.identity, self.identity)


def small_config(hidden):
    return ModelConfig(input_size=4, feature_win=16, enc_hidden_size=hidden, dec_hidden_size=hidden,
                       enc_embedding_size=4, dec_embedding_size=4,
                       asl=AslConfig(hidden_size=8, sample_rate=100.0, freq_threshold=30.0))


class TestLatency(unittest.TestCase):
    def test_single_rep(self):
        stats = bench_latency(build_model(small_config(8)), reps=1, warmup=0)
        self.assertEqual(len(stats.samples_ms), 1)
        self.assertGreater(stats.median_ms, 0.0)
        self.assertEqual(stats.mad_ms, 0.0)

    def test_bad_reps(self):
        with self.assertRaises(ConfigError):
            bench_latency(build_model(small_config(8)), reps=0)

    def test_sweep_parameter_counts_grow(self):
        frame = param_sweep([small_config(h) for h in (4, 8, 16)], reps=2, warmup=1,
                            score=lambda cfg: float(cfg.enc_hidden_size))
        self.assertEqual(list(frame["enc_hidden_size"]), [4, 8, 16])
        self.assertTrue(np.all(np.diff(frame["n_params"]) > 0))
        assert_array_equal(frame["best_val_loss"], [4.0, 8.0, 16.0])
        self.assertTrue(np.all(frame["median_ms"] > 0))


if __name__ == '__main__':
    unittest.main()
