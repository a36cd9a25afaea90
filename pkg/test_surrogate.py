#!/usr/bin/env python3
"""
Tests for feature encoding, the convolutional surrogate, thresholds and metrics
"""

import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).parent))

from mipcore import Solution, VariableIndex
from scenariogen import JobSchedule
from surrogate import (ConvClassifier, LayerSpec, NormStats, SurrogateError, Thresholds, TrainConfig,
                       asymmetric_loss, average_precision, bump_threshold, calibrate_thresholds, class_accuracy,
                       class_weights, encode_features, extract_labels, filter_predictions, gradient_check,
                       load_model, mean_average_precision, predict, save_model, split_indices, strip_padding,
                       thresholds_from_predictions, train, valid_mask, weighted_bce)

TINY = LayerSpec(channels=(4, 4), kernel=3, pool=2, hidden=8)


def random_maps(n, evs=2, e_max=3, buses=3, timesteps=6, seed=0):
    rng = np.random.default_rng(seed)
    maps = []
    for _ in range(n):
        triples = tuple((k, int(rng.integers(1, 4)), int(rng.integers(0, timesteps - 1))) for k in range(evs))
        maps.append(encode_features(rng.uniform(0, 50, timesteps), rng.uniform(0, 30, (buses, timesteps)),
                                    rng.uniform(0, 15, (buses, timesteps)), JobSchedule(triples), evs, e_max))
    return maps


def random_labels(n, evs=2, e_max=3, d_ev=10, seed=0):
    rng = np.random.default_rng(seed)
    labels = (rng.uniform(size=(n, e_max * d_ev)) > 0.7).astype(np.int8)
    labels[:, evs * d_ev:] = 0
    return labels


class TestEncoding(unittest.TestCase):
    def test_schedule_value_at_its_timespan(self):
        schedule = JobSchedule(((0, 5, 8), (1, 2, 0), (3, 9, 1)))
        fm = encode_features(np.ones(10), np.zeros((4, 10)), np.zeros((4, 10)), schedule, evs=2, e_max=5)
        self.assertEqual(fm.values.shape, (1 + 2 * 4 + 5, 10))
        self.assertEqual(fm.values[fm.schedule_offset, 8], 6)
        self.assertEqual(fm.values[fm.schedule_offset + 1, 0], 3)
        # EV 3 is beyond the real fleet
        np.testing.assert_array_equal(fm.values[fm.schedule_offset + 2:], 0.0)
        self.assertEqual(fm.stripped().shape, (1 + 2 * 4 + 2, 10))

    def test_node_zero_differs_from_padding(self):
        schedule = JobSchedule(((0, 0, 2), (1, 0, 0)))
        fm = encode_features(np.ones(5), np.zeros((2, 5)), np.zeros((2, 5)), schedule, evs=2, e_max=3)
        self.assertEqual(fm.values[fm.schedule_offset, 2], 1)
        self.assertEqual(fm.values[fm.schedule_offset + 1, 0], 1)
        self.assertEqual(np.count_nonzero(fm.values[fm.schedule_offset:]), 2)

    def test_solar_summed_over_units(self):
        fm = encode_features(np.ones((3, 4)), np.zeros((2, 4)), np.zeros((2, 4)), JobSchedule(), 0, 1)
        np.testing.assert_array_equal(fm.values[0], 3.0)

    def test_fleet_over_capacity(self):
        with self.assertRaises(SurrogateError):
            encode_features(np.ones(4), np.zeros((2, 4)), np.zeros((2, 4)), JobSchedule(), 4, 3)

    def test_normalization_keeps_padding_zero(self):
        maps = random_maps(6)
        stats = NormStats.fit(maps)
        for fm in maps:
            scaled = stats.normalize(fm).values
            self.assertTrue(np.all((scaled >= -1e-12) & (scaled <= 1.0 + 1e-12)))
            np.testing.assert_array_equal(scaled[fm.schedule_offset + fm.evs:], 0.0)
        again = NormStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(again.hi, stats.hi)

    def test_strip_padding(self):
        probs = np.arange(30.0)
        np.testing.assert_array_equal(strip_padding(probs, 2, 10), np.arange(20.0))
        with self.assertRaises(SurrogateError):
            strip_padding(probs, 4, 10)
        mask = valid_mask(1, 3, 10)
        self.assertEqual(int(mask.sum()), 10)
        self.assertTrue(mask[:10].all())


class TestLabels(unittest.TestCase):
    def setUp(self):
        self.index = VariableIndex(scenarios=1, evs=1, arcs=8, timespans=5, stations=(2,), timesteps=6,
                                   generators=1, pv_units=1, lines=2, buses=3)

    def test_padded_to_capacity(self):
        values = np.zeros(self.index.size)
        values[[0, 9, self.index.d_ev - 1]] = 1.0
        values[self.index.binary_count:] = 7.5
        labels = extract_labels(Solution(values, 0.0, "optimal", 0.0), self.index, evs=1, e_max=3)
        self.assertEqual(labels.shape, (3 * self.index.d_ev,))
        self.assertEqual(labels[:self.index.d_ev].sum(), 3)
        self.assertEqual(labels[self.index.d_ev:].sum(), 0)

    def test_rejects_stochastic_solution(self):
        index = VariableIndex(scenarios=2, evs=1, arcs=8, timespans=5, stations=(2,), timesteps=6,
                              generators=1, pv_units=1, lines=2, buses=3)
        with self.assertRaises(SurrogateError):
            extract_labels(Solution(np.zeros(index.size), 0.0, "optimal", 0.0), index, 1, 3)

    def test_rejects_missing_values(self):
        with self.assertRaises(SurrogateError):
            extract_labels(Solution(None, None, "infeasible", 0.0), self.index, 1, 3)


class TestNetwork(unittest.TestCase):
    def test_output_shape(self):
        net = ConvClassifier(in_channels=7, timesteps=25, outputs=11, spec=TINY)
        self.assertEqual(net(torch.zeros(2, 7, 25)).shape, (2, 11))

    def test_horizon_shorter_than_pool(self):
        net = ConvClassifier(in_channels=3, timesteps=1, outputs=4, spec=TINY)
        self.assertEqual(net(torch.zeros(1, 3, 1)).shape, (1, 4))

    def test_gradient_check(self):
        self.assertLess(gradient_check(TINY, in_channels=4, timesteps=6, outputs=7, batch=5), 1e-4)

    def test_class_weights(self):
        labels = np.array([[1, 0, 0, 0]])
        w0, w1 = class_weights(labels, np.ones_like(labels, dtype=bool))
        self.assertAlmostEqual(w0, 4 / 6)
        self.assertAlmostEqual(w1, 2.0)
        self.assertEqual(class_weights(np.ones((1, 2)), np.ones((1, 2), dtype=bool)), (1.0, 0.5))

    def test_masked_positions_do_not_count(self):
        targets = torch.tensor([[1.0, 0.0, 0.0]])
        mask = torch.tensor([[1.0, 1.0, 0.0]])
        a = weighted_bce(torch.tensor([[2.0, -1.0, 5.0]]), targets, mask, 1.0, 1.0)
        b = weighted_bce(torch.tensor([[2.0, -1.0, -5.0]]), targets, mask, 1.0, 1.0)
        self.assertAlmostEqual(float(a), float(b), places=12)

    def test_asymmetric_reduces_to_bce(self):
        logits = torch.tensor([[0.3, -1.2, 2.0, 0.0]], dtype=torch.float64)
        targets = torch.tensor([[1.0, 0.0, 1.0, 0.0]], dtype=torch.float64)
        mask = torch.ones_like(targets)
        self.assertAlmostEqual(float(asymmetric_loss(logits, targets, mask, 0.0, 0.0, 0.0)),
                               float(weighted_bce(logits, targets, mask, 1.0, 1.0)), places=9)


class TestTraining(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.maps = random_maps(12)
        self.labels = random_labels(12)
        self.cfg = TrainConfig(epochs=3, batch_size=4, layers=TINY, val_fraction=0.25)

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_train_and_predict(self):
        model = train(self.maps, self.labels, d_ev=10, cfg=self.cfg)
        self.assertEqual(len(model.history), 3)
        self.assertIn("val_loss", model.history[-1])
        probs = predict(model, self.maps[0])
        self.assertEqual(probs.shape, (30,))
        self.assertTrue(np.all((probs > 0.0) & (probs < 1.0)))
        np.testing.assert_array_equal(probs, predict(model, self.maps[0]))
        self.assertEqual(predict(model, self.maps[:4]).shape, (4, 30))

    def test_asymmetric_training(self):
        model = train(self.maps, self.labels, d_ev=10, cfg=TrainConfig(epochs=1, layers=TINY, loss="asymmetric"))
        self.assertEqual(model.outputs, 30)

    def test_rejects_bad_inputs(self):
        with self.assertRaises(SurrogateError):
            train([], self.labels, d_ev=10, cfg=self.cfg)
        with self.assertRaises(SurrogateError):
            train(self.maps, self.labels[:, :20], d_ev=10, cfg=self.cfg)
        with self.assertRaises(SurrogateError):
            train(self.maps, self.labels, d_ev=10, cfg=TrainConfig(epochs=1, layers=TINY, loss="hinge"))

    def test_predict_checks_shape(self):
        model = train(self.maps, self.labels, d_ev=10, cfg=self.cfg)
        with self.assertRaises(SurrogateError):
            predict(model, random_maps(1, timesteps=7)[0])

    def test_save_and_load(self):
        model = train(self.maps, self.labels, d_ev=10, cfg=self.cfg)
        model.thresholds = calibrate_thresholds(model, self.maps, self.labels)
        again = load_model(save_model(self.tmp / "model.pt", model))
        self.assertEqual(again.thresholds, model.thresholds)
        self.assertEqual(again.spec, model.spec)
        np.testing.assert_allclose(predict(again, self.maps[1]), predict(model, self.maps[1]), atol=1e-7)

    def test_split_indices(self):
        train_idx, val_idx = split_indices(10, 0.1, seed=0)
        self.assertEqual(len(val_idx), 1)
        self.assertEqual(sorted(np.concatenate([train_idx, val_idx]).tolist()), list(range(10)))
        self.assertEqual(len(split_indices(1, 0.5, seed=0)[1]), 0)


class TestThresholds(unittest.TestCase):
    def test_three_point_example(self):
        thresholds = thresholds_from_predictions([0.8, 0.6, 0.1], [1, 1, 0])
        self.assertAlmostEqual(thresholds.p1, 0.7)
        self.assertAlmostEqual(thresholds.p0, 0.9)

    def test_perfect_predictor(self):
        labels = np.array([1, 0, 0, 1, 0])
        thresholds = thresholds_from_predictions(labels.astype(float), labels)
        self.assertEqual((thresholds.p0, thresholds.p1), (1.0, 1.0))

    def test_mask_excludes_padding(self):
        thresholds = thresholds_from_predictions([0.8, 0.6, 0.1, 0.99], [1, 1, 0, 0], [True, True, True, False])
        self.assertAlmostEqual(thresholds.p0, 0.9)

    def test_single_class_rejected(self):
        with self.assertRaises(SurrogateError):
            thresholds_from_predictions([0.2, 0.4], [0, 0])

    def test_filtering(self):
        thresholds = Thresholds(p0=0.9958, p1=0.7164)
        assignment = filter_predictions([0.8, 0.3, 0.001], thresholds)
        self.assertEqual(assignment.values, {0: 1, 2: 0})
        shifted = filter_predictions([0.8, 0.3], thresholds, offset=100)
        self.assertEqual(shifted.values, {100: 1})

    def test_bump(self):
        self.assertAlmostEqual(bump_threshold(Thresholds(0.9958, 0.7164)).p1, 0.8164)
        self.assertEqual(bump_threshold(Thresholds(0.9958, 0.95)).p1, 1.0)
        self.assertEqual(bump_threshold(Thresholds(0.9958, 0.95)).p0, 0.9958)

    def test_bumping_fixes_fewer_ones(self):
        probs = np.random.default_rng(3).uniform(size=200)
        thresholds = Thresholds(p0=0.99, p1=0.5)
        previous = len(filter_predictions(probs, thresholds))
        while thresholds.p1 < 1.0:
            thresholds = bump_threshold(thresholds)
            fixed = len(filter_predictions(probs, thresholds))
            self.assertLessEqual(fixed, previous)
            previous = fixed

    def test_invalid_thresholds(self):
        with self.assertRaises(SurrogateError):
            filter_predictions([0.5], Thresholds(p0=1.2, p1=0.5))


class TestMetrics(unittest.TestCase):
    def test_average_precision(self):
        self.assertAlmostEqual(average_precision([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]), (1.0 + 2.0 / 3.0) / 2)
        self.assertTrue(np.isnan(average_precision([0.5, 0.4], [0, 0])))

    def test_perfect_predictor(self):
        labels = np.array([1, 0, 0, 1, 1, 0])
        probs = labels.astype(float)
        self.assertEqual(class_accuracy(probs, labels), (1.0, 1.0))
        self.assertAlmostEqual(mean_average_precision(probs, labels), 1.0)

    def test_class_accuracy(self):
        acc0, acc1 = class_accuracy([0.2, 0.7, 0.4, 0.6], [0, 0, 1, 1])
        self.assertEqual((acc0, acc1), (0.5, 0.5))
        acc0, acc1 = class_accuracy([0.2, 0.9], [0, 1], mask=[True, False])
        self.assertEqual(acc0, 1.0)
        self.assertTrue(np.isnan(acc1))


if __name__ == "__main__":
    unittest.main()
