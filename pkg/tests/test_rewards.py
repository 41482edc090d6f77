import hashlib
import os
import struct
import sys
import unittest
from decimal import Decimal, getcontext

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

from craftalign.model import Condition
from craftalign.rewards import (
    CompositeWeights,
    RewardError,
    RewardScaler,
    RewardVector,
    SyntheticRewardModel,
    composite,
    composite_array,
    fit_scaler,
    hash_noise,
    score,
)
from craftalign.sampler import Sample

getcontext().prec = 50

TARGETS = [[2.0, 0.0], [-1.0, 1.7320508075688772], [-1.0, -1.7320508075688772]]


def original(prompt_id: int, label: int) -> Condition:
    return Condition(id=prompt_id, variant=0, embedding=np.eye(3)[label], label=label)


class TestSyntheticRewards(unittest.TestCase):
    def setUp(self) -> None:
        self.rm = SyntheticRewardModel(TARGETS, aesthetic_lambda=0.1, noise_amp=0.05)

    def test_alignment_maximum_at_target(self):
        c = original(4, 1)
        self.assertEqual(score(np.array(TARGETS[1]), c, "h", self.rm), 0.0)

    def test_aesthetic_maximum_at_origin(self):
        self.assertEqual(score(np.zeros(2), original(0, 2), "a", self.rm), 0.0)
        self.assertLess(score(np.array([0.5, 0.5]), original(0, 2), "a", self.rm), 0.0)

    def test_preference_against_big_float(self):
        rng = np.random.default_rng(0)
        for k in range(50):
            x = rng.standard_normal(2) * 2
            label = k % 3
            c = original(k, label)
            got = score(x, c, "p", self.rm)
            xs = [Decimal(float(v)) for v in x]
            mu = [Decimal(v) for v in TARGETS[label]]
            r_h = -sum((a - b) ** 2 for a, b in zip(xs, mu))
            sq = sum(a * a for a in xs)
            r_a = -Decimal("0.1") * sq * sq / (1 + sq)
            payload = np.asarray(x, dtype="<f8").tobytes() + struct.pack("<q", k)
            u = int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")
            noise = Decimal(u) / Decimal(2) ** 63 - 1
            exact = Decimal("0.7") * r_h + Decimal("0.3") * r_a + Decimal("0.05") * noise
            self.assertLess(abs(Decimal(got) - exact), Decimal("1e-12") * max(Decimal(1), abs(exact)))

    def test_refined_condition_rejected(self):
        refined = Condition(id=0, variant=2, embedding=np.eye(3)[0], label=0)
        with self.assertLogs(level="ERROR"):
            with self.assertRaises(RewardError):
                self.rm.score_vector(np.zeros(2), refined)

    def test_accepts_sample_objects(self):
        smp = Sample(x0=np.array(TARGETS[0]), seed=1, condition_ref=(0, 3))
        self.assertEqual(score(smp, original(0, 0), "h", self.rm), 0.0)

    def test_unknown_reward_id(self):
        with self.assertRaises(RewardError):
            score(np.zeros(2), original(0, 0), "x", self.rm)

    def test_hash_noise_bounded_and_deterministic(self):
        rng = np.random.default_rng(1)
        for k in range(200):
            x = rng.standard_normal(2)
            v = hash_noise(x, k)
            self.assertGreaterEqual(v, -1.0)
            self.assertLess(v, 1.0)
            self.assertEqual(v, hash_noise(x.copy(), k))

    def test_non_finite_vector_rejected(self):
        with self.assertRaises(RewardError):
            RewardVector(float("nan"), 0.0, 0.0)


class TestScaler(unittest.TestCase):
    def test_constant_pool(self):
        pool = [RewardVector(1.5, -2.0, 0.25)] * 5
        sc = fit_scaler(pool)
        self.assertEqual(sc.std, (1e-8, 1e-8, 1e-8))
        self.assertTrue(np.all(sc.transform(pool[0]) == 0.0))
        self.assertEqual(sc.count, 5)

    def test_two_point_pool(self):
        sc = fit_scaler([RewardVector(0.0, 0.0, 0.0), RewardVector(2.0, 2.0, 2.0)])
        self.assertEqual(sc.mean, (1.0, 1.0, 1.0))
        self.assertEqual(sc.std, (1.0, 1.0, 1.0))
        self.assertTrue(np.array_equal(sc.transform(RewardVector(0.0, 0.0, 0.0)), -np.ones(3)))
        self.assertTrue(np.array_equal(sc.transform(RewardVector(2.0, 2.0, 2.0)), np.ones(3)))

    def test_random_pool_moments_big_float(self):
        rng = np.random.default_rng(2)
        raw = rng.standard_normal((1000, 3)) * np.array([3.0, 0.5, 10.0]) + np.array([-4.0, 1.0, 7.0])
        z = fit_scaler(raw).transform(raw)
        for ch in range(3):
            col = [Decimal(float(v)) for v in z[:, ch]]
            mean = sum(col) / len(col)
            var = sum((v - mean) ** 2 for v in col) / len(col)
            self.assertLess(abs(mean), Decimal("1e-12"))
            self.assertLess(abs(var.sqrt() - 1), Decimal("1e-12"))

    def test_refit_on_scaled_is_identity(self):
        rng = np.random.default_rng(3)
        raw = rng.standard_normal((400, 3)) * 5 + 2
        refit = fit_scaler(fit_scaler(raw).transform(raw))
        for m, s in zip(refit.mean, refit.std):
            self.assertLess(abs(m), 1e-12)
            self.assertLess(abs(s - 1.0), 1e-12)

    def test_empty_pool(self):
        with self.assertLogs(level="ERROR"):
            with self.assertRaises(RewardError):
                fit_scaler([])

    def test_dict_round_trip(self):
        sc = fit_scaler(np.array([[0.0, 1.0, 2.0], [1.0, 3.0, 2.5]]))
        self.assertEqual(RewardScaler.from_dict(sc.to_dict()), sc)

    def test_invalid_dict(self):
        with self.assertRaises(RewardError):
            RewardScaler.from_dict({"mean": [0, 0], "std": [1, 1], "count": 1})


class TestComposite(unittest.TestCase):
    def setUp(self) -> None:
        self.unit = RewardScaler(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0), count=1)

    def test_default_weights(self):
        w = CompositeWeights()
        self.assertEqual((w.alpha_h, w.alpha_p, w.alpha_a), (0.4, 0.4, 0.2))

    def test_equal_scaled_values(self):
        v = 0.731
        self.assertAlmostEqual(composite(RewardVector(v, v, v), self.unit, CompositeWeights()), v, places=15)

    def test_arithmetic(self):
        self.assertEqual(composite(RewardVector(1.0, -1.0, 0.0), self.unit, CompositeWeights()), 0.0)

    def test_weights_must_sum_to_one(self):
        with self.assertRaises(RewardError):
            CompositeWeights(0.5, 0.5, 0.1)

    def test_negative_weight(self):
        with self.assertRaises(RewardError):
            CompositeWeights(1.2, -0.2, 0.0)

    def test_restricted_weights(self):
        w = CompositeWeights()
        h = w.restricted_to("h")
        self.assertEqual((h.alpha_h, h.alpha_p, h.alpha_a), (1.0, 0.0, 0.0))
        ha = w.restricted_to("ha")
        self.assertAlmostEqual(ha.alpha_h, 2.0 / 3.0, places=15)
        self.assertEqual(ha.alpha_p, 0.0)
        self.assertAlmostEqual(ha.alpha_a, 1.0 / 3.0, places=15)
        self.assertEqual(w.restricted_to("hpa"), w)
        with self.assertRaises(RewardError):
            w.restricted_to("q")

    def test_monotone_in_each_channel(self):
        w = CompositeWeights()
        base = composite(RewardVector(0.1, 0.2, 0.3), self.unit, w)
        for bumped in (RewardVector(0.2, 0.2, 0.3), RewardVector(0.1, 0.3, 0.3), RewardVector(0.1, 0.2, 0.4)):
            self.assertGreater(composite(bumped, self.unit, w), base)

    def test_ranking_invariant_to_channel_affine_map(self):
        rng = np.random.default_rng(4)
        raw = rng.standard_normal((500, 3))
        w = CompositeWeights()
        before = np.argsort(composite_array(raw, fit_scaler(raw), w))
        for ch in range(3):
            shifted = raw.copy()
            shifted[:, ch] = 3.5 * shifted[:, ch] - 12.0
            after = np.argsort(composite_array(shifted, fit_scaler(shifted), w))
            self.assertTrue(np.array_equal(before, after))

    def test_composite_array_matches_scalar(self):
        sc = RewardScaler(mean=(1.0, -1.0, 0.5), std=(2.0, 0.5, 1.0), count=3)
        raw = np.array([[0.0, 1.0, 2.0], [3.0, -2.0, 0.0]])
        w = CompositeWeights()
        arr = composite_array(raw, sc, w)
        for k in range(2):
            self.assertAlmostEqual(arr[k], composite(RewardVector.from_array(raw[k]), sc, w), places=14)


if __name__ == "__main__":
    unittest.main()
