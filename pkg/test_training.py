#!/usr/bin/env python3
import os
import sys
import shutil
import tempfile
import unittest

import numpy as np

# Add the parent directory to the path so we can import from src
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.checkpoint import Stage
from src.errors import CheckpointError, ConfigError, DataError
from src.radar_data import ConfMap, RadarSnippet, SceneLabel, slice_snippets
from src.scenemix import AugmentPolicy, MixSample
from src.slnet_models import ArchSpec
from src.synth_generator import generate_sequence, make_scenario
from src.training import (HistoryRow, TrainPlan, classify_snippets, evaluate_loss, finetune, majority_vote,
                          predict_confmaps, train_classifier, train_universal, write_history_csv)

SLOW = os.environ.get('SLNET_SLOW_TESTS') == '1'
ARCH = ArchSpec('c21d', 0.125, window=4, grid_size=16)
CLASSIFIER = ArchSpec('classifier', 0.125, window=4, grid_size=16)


def make_samples(count, scene=SceneLabel.STATIC, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        snippet = RadarSnippet(rng.normal(size=(2, 4, 16, 16)).astype(np.float32), f"{scene.value}_{i}", 0, scene)
        target = np.zeros((3, 4, 16, 16), dtype=np.float32)
        target[i % 3, :, 8, 8] = 1.0
        samples.append(MixSample(snippet, ConfMap(target), scene))
    return samples


def plan(**overrides):
    values = dict(epochs_universal=2, epochs_finetune=1, epochs_classifier=1, batch_size=2, lr=1e-3,
                  augment=AugmentPolicy.disabled(), seed=7)
    values.update(overrides)
    return TrainPlan(**values)


class TestTrainPlan(unittest.TestCase):

    def test_invalid_plans(self):
        with self.assertRaises(ConfigError):
            plan(epochs_universal=0)
        with self.assertRaises(ConfigError):
            plan(epochs_finetune=-1)
        with self.assertRaises(ConfigError):
            plan(batch_size=0)
        with self.assertRaises(ConfigError):
            plan(lr=0.0)
        with self.assertRaises(ConfigError):
            plan(warmup_fraction=1.0)

    def test_zero_finetune_epochs_allowed(self):
        self.assertEqual(plan(epochs_finetune=0).epochs_finetune, 0)


class TestDetectorTraining(unittest.TestCase):

    def setUp(self):
        self.samples = make_samples(4, SceneLabel.STATIC) + make_samples(2, SceneLabel.DYNAMIC, seed=1)

    def test_universal_stage(self):
        ckpt, history = train_universal(self.samples, plan(), ARCH, val_samples=self.samples[:2], fingerprint='fp')
        self.assertIs(ckpt.stage, Stage.UNIVERSAL)
        self.assertEqual(ckpt.fingerprint, 'fp')
        self.assertEqual([row.epoch for row in history], [1, 2])
        self.assertTrue(all(row.stage == 'universal' and row.val_loss is not None for row in history))
        self.assertEqual(ckpt.optim.step, 2 * 3)

    def test_training_is_deterministic(self):
        a, _ = train_universal(self.samples, plan(augment=AugmentPolicy(rng_seed=1)), ARCH)
        b, _ = train_universal(self.samples, plan(augment=AugmentPolicy(rng_seed=1)), ARCH)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])

    def test_loss_goes_down(self):
        samples = make_samples(1) + make_samples(1, SceneLabel.DYNAMIC, seed=1)
        _, history = train_universal(samples, plan(epochs_universal=10, lr=1e-2), ARCH)
        self.assertLess(history[-1].train_loss, history[0].train_loss)

    def test_zero_epoch_finetune_keeps_the_weights(self):
        base, _ = train_universal(self.samples, plan(), ARCH)
        tuned, history = finetune(base, self.samples[:4], plan(epochs_finetune=0), SceneLabel.STATIC)
        self.assertEqual(history, [])
        self.assertIs(tuned.stage, Stage.FINETUNED_STATIC)
        self.assertIsNone(tuned.optim)
        for name in base.tensors:
            np.testing.assert_array_equal(tuned.tensors[name], base.tensors[name])

    def test_finetune_changes_the_weights(self):
        base, _ = train_universal(self.samples, plan(), ARCH)
        tuned, history = finetune(base, self.samples[4:], plan(), 'dynamic')
        self.assertIs(tuned.stage, Stage.FINETUNED_DYNAMIC)
        self.assertEqual(history[0].stage, 'finetuned_dynamic')
        self.assertTrue(any(not np.array_equal(tuned.tensors[n], base.tensors[n]) for n in base.tensors))

    def test_finetune_rejects_other_scenes(self):
        base, _ = train_universal(self.samples, plan(), ARCH)
        with self.assertRaises(DataError):
            finetune(base, self.samples, plan(), SceneLabel.STATIC)
        with self.assertRaises(DataError):
            finetune(base, self.samples[:4], plan(), None)

    def test_finetune_needs_a_universal_base(self):
        base, _ = train_universal(self.samples, plan(), ARCH)
        tuned, _ = finetune(base, self.samples[:4], plan(), SceneLabel.STATIC)
        with self.assertRaises(CheckpointError):
            finetune(tuned, self.samples[:4], plan(), SceneLabel.STATIC)

    def test_bad_inputs(self):
        with self.assertRaises(ConfigError):
            train_universal(self.samples, plan(), CLASSIFIER)
        with self.assertRaises(DataError):
            train_universal([], plan(), ARCH)
        with self.assertRaises(DataError):
            train_universal(self.samples, plan(), ArchSpec('c21d', 0.125, window=8, grid_size=16))

    def test_universal_stage_needs_both_scenes(self):
        with self.assertRaises(DataError):
            train_universal(make_samples(4, SceneLabel.STATIC), plan(), ARCH)
        with self.assertRaises(DataError):
            train_universal(make_samples(3, SceneLabel.DYNAMIC), plan(), ARCH)

    def test_predicted_confmaps(self):
        base, _ = train_universal(self.samples, plan(), ARCH)
        maps = predict_confmaps(base, [s.snippet for s in self.samples[:3]], batch_size=2)
        self.assertEqual(len(maps), 3)
        for cmap in maps:
            self.assertEqual(cmap.data.shape, (3, 4, 16, 16))
            self.assertTrue(np.all((cmap.data >= 0) & (cmap.data <= 1)))
        self.assertGreaterEqual(evaluate_loss(base.to_model(), self.samples), 0.0)


class TestSceneClassifier(unittest.TestCase):

    def test_majority_vote(self):
        S, D = SceneLabel.STATIC, SceneLabel.DYNAMIC
        self.assertIs(majority_vote([D, D, S]), D)
        self.assertIs(majority_vote([D, S]), S)
        self.assertIs(majority_vote([]), S)

    def test_needs_both_scenes(self):
        snippets = [s.snippet for s in make_samples(3)]
        with self.assertRaises(DataError):
            train_classifier(snippets, plan(), CLASSIFIER)

    def test_needs_labels(self):
        snippet = RadarSnippet(np.zeros((2, 4, 16, 16), dtype=np.float32), 'x', 0, None)
        with self.assertRaises(DataError):
            train_classifier([snippet], plan(), CLASSIFIER)

    def test_needs_a_classifier_architecture(self):
        snippets = [s.snippet for s in make_samples(2) + make_samples(2, SceneLabel.DYNAMIC)]
        with self.assertRaises(ConfigError):
            train_classifier(snippets, plan(), ARCH)

    def test_report_shape(self):
        train = [s.snippet for s in make_samples(2) + make_samples(2, SceneLabel.DYNAMIC, seed=1)]
        test = [s.snippet for s in make_samples(2, seed=2)]
        ckpt, history, report = train_classifier(train, plan(), CLASSIFIER, held_out=test)
        self.assertIs(ckpt.stage, Stage.CLASSIFIER)
        self.assertEqual(len(history), 1)
        self.assertEqual([row.scene for row in report.rows], ['static', 'dynamic'])
        self.assertEqual(report.rows[0].test_sequences, 2)
        self.assertIsNone(report.rows[1].accuracy)
        self.assertEqual(len(classify_snippets(ckpt, test)), 2)
        with self.assertRaises(CheckpointError):
            predict_confmaps(ckpt, test)

    @unittest.skipUnless(SLOW, "set SLNET_SLOW_TESTS=1 to run")
    def test_separates_static_from_dynamic(self):
        def snippets(seeds):
            out = []
            for seed in seeds:
                for scene in SceneLabel:
                    seq, _ = generate_sequence(make_scenario(seed, scene, num_frames=12, grid_size=16,
                                                             sequence_id=f"{scene.value}_{seed}"))
                    out.extend(slice_snippets(seq, 4, 4))
            return out

        ckpt, _, report = train_classifier(snippets(range(8)), plan(epochs_classifier=15, lr=1e-3), CLASSIFIER,
                                           held_out=snippets(range(100, 104)))
        self.assertGreaterEqual(report.sequence_accuracy, 0.75)


class TestHistoryCsv(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_written_rows(self):
        rows = [HistoryRow(1, 'universal', 0.001, 0.5, 0.25), HistoryRow(1, 'classifier', 0.001, 0.7, None)]
        path = write_history_csv(os.path.join(self.tmp, 'log.csv'), rows)
        with open(path) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], 'epoch,stage,lr,train_loss,val_loss')
        self.assertEqual(lines[1], '1,universal,0.001,0.5,0.25')
        self.assertEqual(lines[2], '1,classifier,0.001,0.7,')


if __name__ == '__main__':
    unittest.main()
