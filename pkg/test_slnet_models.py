#!/usr/bin/env python3
import os
import sys
import unittest

import numpy as np

# Add the parent directory to the path so we can import from src
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.errors import ConfigError, ShapeError
from src.slnet_models import ArchSpec, ArchVariant, build

DETECTORS = ('c21d', 'r18d', 'r18uc')


def small(variant, window=4):
    return ArchSpec(variant, 0.125, window=window, grid_size=16)


class TestArchSpec(unittest.TestCase):

    def test_names(self):
        self.assertEqual(ArchSpec('c21d', 0.25).name, 'c21d_w0.25')
        self.assertEqual(ArchSpec('r18uc').name, 'r18uc_w1')

    def test_temporal_strides(self):
        self.assertEqual(ArchSpec('c21d', window=16).temporal_strides(), [2, 2, 2])
        self.assertEqual(ArchSpec('c21d', window=4).temporal_strides(), [2, 2, 1])
        self.assertEqual(ArchSpec('c21d', window=3).temporal_strides(), [1, 1, 1])
        self.assertEqual(ArchSpec('r18d', window=8).temporal_strides(), [2, 2, 2, 1])

    def test_grid_must_divide(self):
        with self.assertRaises(ConfigError):
            ArchSpec('c21d', grid_size=12)
        with self.assertRaises(ConfigError):
            ArchSpec('r18d', grid_size=24)
        ArchSpec('c21d', grid_size=24)

    def test_invalid_fields(self):
        with self.assertRaises(ConfigError):
            ArchSpec('vgg')
        with self.assertRaises(ConfigError):
            ArchSpec('c21d', width=0.0)
        with self.assertRaises(ConfigError):
            ArchSpec('c21d', window=0)

    def test_dict_round_trip(self):
        arch = small('r18uc')
        self.assertEqual(ArchSpec.from_dict(arch.to_dict()), arch)
        self.assertEqual(arch.to_dict()['variant'], 'r18uc')

    def test_detector_flag(self):
        self.assertTrue(ArchSpec('r18d').is_detector)
        self.assertFalse(ArchSpec(ArchVariant.CLASSIFIER).is_detector)


class TestModels(unittest.TestCase):

    def setUp(self):
        self.x = np.random.default_rng(0).normal(size=(2, 2, 4, 16, 16)).astype(np.float32)

    def test_detector_output_shapes(self):
        for variant in DETECTORS:
            model = build(small(variant))
            out, _ = model.forward(self.x, 'eval')
            self.assertEqual(out.shape, (2, 3, 4, 16, 16), variant)
            self.assertTrue(np.all((out >= 0) & (out <= 1)), variant)
            self.assertEqual(out.dtype, np.float32)

    def test_odd_window_keeps_its_length(self):
        model = build(small('c21d', window=3))
        out, _ = model.forward(self.x[:, :, :3], 'eval')
        self.assertEqual(out.shape, (2, 3, 3, 16, 16))

    def test_classifier_logits(self):
        model = build(small('classifier'))
        logits, _ = model.forward(self.x, 'eval')
        self.assertEqual(logits.shape, (2, 2))

    def test_backward_covers_every_parameter(self):
        for variant in DETECTORS + ('classifier',):
            model = build(small(variant))
            out, cache = model.forward(self.x, 'train')
            grad_x, grads = model.backward(cache, np.ones_like(out))
            self.assertEqual(grad_x.shape, self.x.shape)
            self.assertEqual(set(grads), set(model.params), variant)
            for name, g in grads.items():
                self.assertEqual(g.shape, model.params[name].shape, name)

    def test_param_count_matches_layer_specs(self):
        for variant in DETECTORS + ('classifier',):
            model = build(small(variant))
            expected = sum(spec.param_count() for spec in model.net.primitive_specs())
            self.assertEqual(model.param_count(), expected, variant)

    def test_wider_models_have_more_parameters(self):
        narrow = build(ArchSpec('c21d', 0.125, window=4, grid_size=16))
        wide = build(ArchSpec('c21d', 0.25, window=4, grid_size=16))
        self.assertGreater(wide.param_count(), narrow.param_count())

    def test_seeded_initialisation(self):
        a, b, c = build(small('r18d'), seed=3), build(small('r18d'), seed=3), build(small('r18d'), seed=4)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        self.assertTrue(any(not np.array_equal(a.params[n], c.params[n]) for n in a.params))

    def test_copy_is_independent(self):
        model = build(small('c21d'), seed=1)
        clone = model.copy()
        name = next(iter(model.params))
        np.testing.assert_array_equal(clone.params[name], model.params[name])
        clone.params[name][...] = 0.0
        self.assertFalse(np.all(model.params[name] == 0.0))

    def test_state_arrays_include_buffers(self):
        model = build(small('c21d'))
        state = model.state_arrays()
        self.assertTrue(any(k.startswith('buffer:') and k.endswith('running_mean') for k in state))

    def test_load_state_mismatch(self):
        model = build(small('c21d'))
        state = dict(model.state_arrays())
        name = next(iter(model.params))
        wrong = dict(state)
        wrong[name] = np.zeros((1,), dtype=np.float32)
        with self.assertRaises(ShapeError):
            model.load_state_arrays(wrong)
        del state[name]
        with self.assertRaises(ShapeError):
            model.load_state_arrays(state)

    def test_input_checks(self):
        model = build(small('c21d'))
        with self.assertRaises(ShapeError):
            model.forward(np.zeros((1, 3, 4, 16, 16), dtype=np.float32))
        with self.assertRaises(ShapeError):
            model.forward(np.zeros((1, 2, 4, 8, 8), dtype=np.float32))


if __name__ == '__main__':
    unittest.main()
