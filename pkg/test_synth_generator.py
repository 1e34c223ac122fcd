#!/usr/bin/env python3
import os
import sys
import unittest

import numpy as np

# Add the parent directory to the path so we can import from src
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.errors import ConfigError
from src.radar_data import SceneLabel
from src.synth_generator import ScenarioConfig, frame_difference_energy, generate_sequence, make_scenario


class TestSynthGenerator(unittest.TestCase):

    def test_same_seed_is_bit_identical(self):
        cfg = make_scenario(7, SceneLabel.DYNAMIC, num_frames=6, grid_size=16)
        seq_a, ann_a = generate_sequence(cfg)
        seq_b, ann_b = generate_sequence(cfg)
        self.assertEqual(seq_a.to_array().tobytes(), seq_b.to_array().tobytes())
        self.assertEqual(ann_a, ann_b)

    def test_different_seeds_differ(self):
        a, _ = generate_sequence(make_scenario(1, SceneLabel.STATIC, num_frames=2, grid_size=16))
        b, _ = generate_sequence(make_scenario(2, SceneLabel.STATIC, num_frames=2, grid_size=16))
        self.assertFalse(np.array_equal(a.to_array(), b.to_array()))

    def test_shapes_and_labels(self):
        seq, annotations = generate_sequence(make_scenario(3, SceneLabel.STATIC, num_frames=5, grid_size=32,
                                                           sequence_id='s3'))
        self.assertEqual(seq.sequence_id, 's3')
        self.assertIs(seq.scene, SceneLabel.STATIC)
        self.assertEqual(seq.to_array().shape, (2, 5, 32, 32))
        for ann in annotations:
            ann.validate(32, 3, 5)

    def test_annotations_sit_on_bright_cells(self):
        seq, annotations = generate_sequence(make_scenario(11, SceneLabel.STATIC, num_frames=4, grid_size=32,
                                                           noise_floor=0.0, num_objects=3))
        self.assertTrue(annotations)
        for ann in annotations:
            frame = seq.frames[ann.frame_index].data
            magnitude = np.hypot(frame[0], frame[1])
            self.assertGreater(magnitude[ann.azimuth_idx, ann.range_idx], 0.5)

    def test_no_objects_means_no_annotations(self):
        _, annotations = generate_sequence(make_scenario(5, SceneLabel.DYNAMIC, num_frames=3, grid_size=16,
                                                         num_objects=0))
        self.assertEqual(annotations, [])

    def test_dynamic_scenes_change_more_between_frames(self):
        for seed in (0, 1, 2):
            static, _ = generate_sequence(make_scenario(seed, SceneLabel.STATIC, num_frames=8, grid_size=32))
            dynamic, _ = generate_sequence(make_scenario(seed, SceneLabel.DYNAMIC, num_frames=8, grid_size=32))
            self.assertGreater(frame_difference_energy(dynamic), frame_difference_energy(static))

    def test_invalid_scenarios(self):
        with self.assertRaises(ConfigError):
            ScenarioConfig(seed=0, scene=SceneLabel.STATIC, ego_drift=1.0)
        with self.assertRaises(ConfigError):
            ScenarioConfig(seed=-1)
        with self.assertRaises(ConfigError):
            ScenarioConfig(seed=0, classes=('a', 'b', 'c', 'd'))
        with self.assertRaises(ConfigError):
            ScenarioConfig(seed=0, scene=None)

    def test_default_drift_per_scene(self):
        self.assertEqual(make_scenario(0, SceneLabel.STATIC).ego_drift, 0.0)
        self.assertEqual(make_scenario(0, SceneLabel.DYNAMIC).ego_drift, 1.0)


if __name__ == '__main__':
    unittest.main()
