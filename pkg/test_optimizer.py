#!/usr/bin/env python3
import os
import sys
import math
import unittest

import numpy as np

# Add the parent directory to the path so we can import from src
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.errors import ConfigError, ShapeError
from src.optimizer import LrSchedule, OptimState, adam_step, lr_at


class TestAdam(unittest.TestCase):

    def test_first_step_moves_by_lr_against_the_sign(self):
        params = {'w': np.zeros(2)}
        state = OptimState.for_parameters(params.items(), base_lr=0.1)
        adam_step(state, params, {'w': np.array([2.0, -3.0])})
        np.testing.assert_allclose(params['w'], [-0.1, 0.1], atol=1e-6)
        self.assertEqual(state.step, 1)

    def test_matches_reference_update(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=5)
        params = {'w': w.copy()}
        state = OptimState.for_parameters(params.items(), base_lr=0.01)
        m, v = np.zeros(5), np.zeros(5)
        for t in range(1, 6):
            g = rng.normal(size=5)
            adam_step(state, params, {'w': g})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(params['w'], w, rtol=1e-10)

    def test_explicit_lr_overrides_base(self):
        params = {'w': np.zeros(1)}
        state = OptimState(base_lr=1.0)
        adam_step(state, params, {'w': np.ones(1)}, lr=0.5)
        np.testing.assert_allclose(params['w'], [-0.5], atol=1e-6)

    def test_keeps_parameter_dtype(self):
        params = {'w': np.zeros(3, dtype=np.float32)}
        adam_step(OptimState(), params, {'w': np.ones(3)})
        self.assertEqual(params['w'].dtype, np.float32)

    def test_shape_errors(self):
        params = {'w': np.zeros(3)}
        with self.assertRaises(ShapeError):
            adam_step(OptimState(), params, {'w': np.zeros(4)})
        with self.assertRaises(ShapeError):
            adam_step(OptimState(), params, {'other': np.zeros(3)})

    def test_invalid_hyperparameters(self):
        with self.assertRaises(ConfigError):
            OptimState(beta1=1.0)
        with self.assertRaises(ConfigError):
            OptimState(base_lr=0.0)


class TestLrSchedule(unittest.TestCase):

    def setUp(self):
        self.schedule = LrSchedule(warmup_steps=10, cycle_length=20, min_lr_fraction=0.01)

    def test_linear_warmup(self):
        self.assertEqual(lr_at(self.schedule, 0, 1.0), 0.0)
        self.assertAlmostEqual(lr_at(self.schedule, 5, 1.0), 0.5)
        self.assertAlmostEqual(lr_at(self.schedule, 10, 1.0), 1.0)

    def test_cosine_midpoint(self):
        self.assertAlmostEqual(lr_at(self.schedule, 20, 1.0), 0.01 + 0.99 * 0.5)

    def test_decays_within_a_cycle(self):
        values = [lr_at(self.schedule, s, 1.0) for s in range(10, 30)]
        self.assertTrue(all(a >= b for a, b in zip(values, values[1:])))
        self.assertGreater(values[-1], 0.01)

    def test_restart_returns_to_base(self):
        self.assertAlmostEqual(lr_at(self.schedule, 30, 1.0), 1.0)
        self.assertAlmostEqual(lr_at(self.schedule, 50, 1.0), 1.0)

    def test_growing_cycles(self):
        schedule = LrSchedule(cycle_length=4, cycle_mult=2.0, min_lr_fraction=0.0)
        self.assertAlmostEqual(lr_at(schedule, 4, 1.0), 1.0)
        self.assertAlmostEqual(lr_at(schedule, 8, 1.0), 0.5 * (1.0 + math.cos(math.pi * 4 / 8)))
        self.assertAlmostEqual(lr_at(schedule, 12, 1.0), 1.0)

    def test_for_stage(self):
        schedule = LrSchedule.for_stage(100, warmup_fraction=0.1, cycles=2)
        self.assertEqual(schedule.warmup_steps, 10)
        self.assertEqual(schedule.cycle_length, 45)

    def test_invalid_schedules(self):
        with self.assertRaises(ConfigError):
            lr_at(self.schedule, -1, 1.0)
        with self.assertRaises(ConfigError):
            LrSchedule(cycle_length=0)
        with self.assertRaises(ConfigError):
            LrSchedule(cycle_mult=0.5)
        with self.assertRaises(ConfigError):
            LrSchedule(min_lr_fraction=1.0)


if __name__ == '__main__':
    unittest.main()
