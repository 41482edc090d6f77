import os
import sys
import unittest
from decimal import Decimal, getcontext

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

from craftalign.schedule import (
    NoiseSchedule,
    ScheduleError,
    build_schedule,
    ddpm_weight,
    forward_diffuse,
    weight_w,
)

getcontext().prec = 50


def big_alpha_bar(betas, t):
    prod = Decimal(1)
    for b in betas[:t]:
        prod *= Decimal(1) - Decimal(float(b))
    return prod


class TestBuildSchedule(unittest.TestCase):
    def test_two_step_product(self):
        s = build_schedule(2, 0.5, 0.5)
        self.assertEqual(s.alpha_bar.tolist(), [0.5, 0.25])

    def test_default_schedule_against_big_float(self):
        s = build_schedule(50, 1e-4, 0.02)
        expected = big_alpha_bar(s.beta, 50)
        rel = abs(Decimal(float(s.alpha_bar[-1])) - expected) / expected
        self.assertLess(rel, Decimal("1e-13"))
        self.assertEqual(s.beta[0], 1e-4)
        self.assertEqual(s.beta[-1], 0.02)

    def test_invariants(self):
        s = build_schedule(50, 1e-4, 0.02)
        self.assertTrue(np.all(np.diff(s.alpha_bar) < 0))
        self.assertLess(s.alpha_bar[-1], s.alpha_bar[0])
        self.assertLess(s.alpha_bar[0], 1.0)
        self.assertTrue(np.all(s.sigma > 0))
        self.assertTrue(np.allclose(s.sigma**2, s.beta))

    def test_beta_end_one_rejected(self):
        with self.assertRaises(ScheduleError):
            build_schedule(50, 1e-4, 1.0)

    def test_domain_error_is_value_error(self):
        with self.assertRaises(ValueError):
            build_schedule(1, 0.1, 0.2)
        with self.assertRaises(ValueError):
            build_schedule(10, 0.3, 0.2)
        with self.assertRaises(ValueError):
            build_schedule(10, 0.0, 0.2)

    def test_arrays_read_only(self):
        s = build_schedule(4, 0.1, 0.2)
        with self.assertRaises(ValueError):
            s.beta[0] = 0.5

    def test_from_betas_rejects_decreasing(self):
        with self.assertRaises(ScheduleError):
            NoiseSchedule.from_betas([0.2, 0.1])


class TestForwardDiffuse(unittest.TestCase):
    def setUp(self) -> None:
        self.s = build_schedule(50, 1e-4, 0.02)

    def test_zero_noise(self):
        x0 = np.array([1.5, -2.0])
        out = forward_diffuse(x0, 10, np.zeros(2), self.s)
        self.assertTrue(np.array_equal(out, np.sqrt(self.s.alpha_bar[9]) * x0))

    def test_unit_noise_first_step(self):
        s = NoiseSchedule.from_betas([0.5, 0.6])
        out = forward_diffuse(np.zeros(2), 1, np.array([1.0, 0.0]), s)
        self.assertAlmostEqual(out[0], np.sqrt(0.5), places=15)
        self.assertEqual(out[1], 0.0)

    def test_random_against_big_float(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x0 = rng.standard_normal(3)
            eps = rng.standard_normal(3)
            t = int(rng.integers(1, 51))
            out = forward_diffuse(x0, t, eps, self.s)
            abar = big_alpha_bar(self.s.beta, t)
            for k in range(3):
                exact = abar.sqrt() * Decimal(float(x0[k])) + (1 - abar).sqrt() * Decimal(float(eps[k]))
                self.assertLess(abs(Decimal(float(out[k])) - exact), Decimal("1e-14"))

    def test_batch_with_per_row_t(self):
        x0 = np.ones((3, 2))
        eps = np.zeros((3, 2))
        out = forward_diffuse(x0, np.array([1, 25, 50]), eps, self.s)
        self.assertTrue(np.allclose(out[:, 0], np.sqrt(self.s.alpha_bar[[0, 24, 49]])))

    def test_dimension_mismatch(self):
        with self.assertRaises(ScheduleError):
            forward_diffuse(np.zeros(2), 1, np.zeros(3), self.s)

    def test_t_out_of_range(self):
        with self.assertRaises(ScheduleError):
            forward_diffuse(np.zeros(2), 0, np.zeros(2), self.s)
        with self.assertRaises(ScheduleError):
            forward_diffuse(np.zeros(2), 51, np.zeros(2), self.s)


class TestWeights(unittest.TestCase):
    def test_two_step_values(self):
        s = build_schedule(2, 0.5, 0.5)
        self.assertAlmostEqual(weight_w(1, s), 1.0, places=14)
        self.assertAlmostEqual(weight_w(2, s), 3.0, places=14)

    def test_default_t25_against_big_float(self):
        s = build_schedule(50, 1e-4, 0.02)
        abar = big_alpha_bar(s.beta, 25)
        sigma2 = Decimal(float(s.sigma[24])) ** 2
        exact = (1 / (2 * sigma2)) * ((1 - abar) / abar)
        rel = abs(Decimal(weight_w(25, s)) - exact) / exact
        self.assertLess(rel, Decimal("1e-12"))

    def test_positive_and_increasing(self):
        s = build_schedule(50, 1e-4, 0.02)
        w = weight_w(np.arange(1, 51), s)
        self.assertTrue(np.all(w > 0))
        self.assertTrue(np.all(np.diff(w) > 0))

    def test_out_of_range(self):
        s = build_schedule(2, 0.5, 0.5)
        with self.assertRaises(ScheduleError):
            weight_w(3, s)

    def test_ddpm_weight_first_step(self):
        # With sigma^2 = beta and 1 - abar_1 = beta_1 the coefficient is 1 / (2 alpha_1).
        s = build_schedule(10, 0.1, 0.3)
        self.assertAlmostEqual(ddpm_weight(1, s), 1.0 / (2 * 0.9), places=12)

    def test_ddpm_weight_differs_from_w(self):
        s = build_schedule(50, 1e-4, 0.02)
        self.assertNotAlmostEqual(ddpm_weight(25, s), weight_w(25, s), places=3)


if __name__ == "__main__":
    unittest.main()
