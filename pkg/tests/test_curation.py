import json
import os
import sys
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

from craftalign.curation import (
    CurationError,
    FileExchangeProvider,
    FilterRule,
    GenerationGroup,
    PerturbationProvider,
    ProviderError,
    RefinementPending,
    SelectionStrategy,
    TrainingPair,
    apply_filter,
    build_prompt_set,
    filter_flags,
    generate_and_score,
    refine_prompts,
    select,
)
from craftalign.rewards import CompositeWeights, SyntheticRewardModel, fit_scaler
from craftalign.sampler import Sample

TARGETS = [[2.0, 0.0], [-1.0, 1.7320508075688772], [-1.0, -1.7320508075688772]]


class FixedSource:
    """Deterministic sample source: x0 depends on the condition only."""

    def __init__(self, diverge_ids=()):
        self.diverge_ids = set(diverge_ids)
        self.calls = []

    def generate(self, conditions, seeds):
        self.calls.append(list(seeds))
        x0 = np.array([[c.embedding[0] + 0.1 * c.variant, c.embedding[1] - 0.05 * c.id] for c in conditions])
        diverged = np.array([c.id in self.diverge_ids for c in conditions])
        x0[diverged] = 0.0
        return x0, diverged


class FailingProvider:
    def refine(self, originals, n_variants):
        raise ProviderError("backend unavailable", prompt_id=originals[1].id)


class FarProvider:
    def refine(self, originals, n_variants):
        return {(c.id, j): c.embedding + 10.0 for c in originals for j in range(1, n_variants + 1)}


def make_group(prompt_id: int, rewards: np.ndarray) -> GenerationGroup:
    rewards = np.asarray(rewards, dtype=np.float64)
    samples = tuple(Sample(x0=np.zeros(2), seed=j, condition_ref=(prompt_id, j)) for j in range(len(rewards)))
    return GenerationGroup(
        prompt_id=prompt_id,
        label=0,
        embedding=np.eye(3)[0],
        samples=samples,
        rewards=rewards,
        r_total=rewards.sum(axis=1),
    )


def make_pair(prompt_id: int, variant: int, r_total: float, advantage=0.0) -> TrainingPair:
    return TrainingPair(
        prompt_id=prompt_id,
        variant=variant,
        label=0,
        x0=np.zeros(2),
        seed=0,
        r_total=r_total,
        advantage=advantage,
        retained_under=frozenset({"hpa"}),
        embedding=np.eye(3)[0],
    )


def brute_force_retained(rewards: np.ndarray, channels: str) -> bool:
    idx = ["hpa".index(ch) for ch in channels]
    for j in range(1, rewards.shape[0]):
        if all(rewards[j, k] > rewards[0, k] for k in idx):
            return True
    return False


class TestPrompts(unittest.TestCase):
    def test_build_prompt_set(self):
        ps = build_prompt_set(7, 3, 4, id_offset=10)
        self.assertEqual(ps.ids, list(range(10, 17)))
        self.assertEqual([c.label for c in ps.originals], [0, 1, 2, 0, 1, 2, 0])
        self.assertTrue(np.array_equal(ps.original(14).embedding, np.eye(3)[1]))
        self.assertFalse(ps.is_refined)

    def test_group_conditions_need_refinement(self):
        with self.assertRaises(CurationError):
            build_prompt_set(2, 3, 2).group_conditions(0)

    def test_perturbation_within_radius(self):
        ps = build_prompt_set(20, 3, 4)
        refined = refine_prompts(ps, PerturbationProvider(0.5, master=42), 0.5)
        self.assertTrue(refined.is_refined)
        for i in refined.ids:
            group = refined.group_conditions(i)
            self.assertEqual([c.variant for c in group], [0, 1, 2, 3, 4])
            for c in group[1:]:
                self.assertLessEqual(np.linalg.norm(c.embedding - group[0].embedding), 0.5)
                self.assertEqual(c.label, group[0].label)

    def test_perturbation_deterministic(self):
        ps = build_prompt_set(5, 3, 2)
        a = PerturbationProvider(0.3, master=1).refine(ps.originals, 2)
        b = PerturbationProvider(0.3, master=1).refine(ps.originals, 2)
        c = PerturbationProvider(0.3, master=2).refine(ps.originals, 2)
        for key in a:
            self.assertTrue(np.array_equal(a[key], b[key]))
        self.assertFalse(all(np.array_equal(a[key], c[key]) for key in a))

    def test_zero_radius_reproduces_originals(self):
        ps = build_prompt_set(3, 3, 2)
        refined = refine_prompts(ps, PerturbationProvider(0.0, master=9), 0.0)
        for i in refined.ids:
            for c in refined.group_conditions(i)[1:]:
                self.assertTrue(np.array_equal(c.embedding, refined.original(i).embedding))

    def test_provider_error_names_prompt(self):
        ps = build_prompt_set(3, 3, 2)
        with self.assertLogs(level="ERROR"):
            with self.assertRaisesRegex(CurationError, "prompt 1"):
                refine_prompts(ps, FailingProvider(), 0.5)

    def test_out_of_radius_rejected(self):
        ps = build_prompt_set(2, 3, 1)
        with self.assertLogs(level="ERROR"):
            with self.assertRaises(CurationError):
                refine_prompts(ps, FarProvider(), 0.5)


class TestFileExchangeProvider(unittest.TestCase):
    def test_request_then_response(self):
        ps = build_prompt_set(2, 3, 2)
        with tempfile.TemporaryDirectory() as tmp:
            provider = FileExchangeProvider(tmp)
            with self.assertRaises(RefinementPending):
                refine_prompts(ps, provider, 0.5)
            requests = [json.loads(ln) for ln in Path(tmp, "requests.jsonl").read_text().splitlines()]
            self.assertEqual(len(requests), 4)
            with open(Path(tmp, "responses.jsonl"), "w") as f:
                for rec in requests:
                    emb = np.asarray(rec["embedding"]) + 0.1
                    f.write(json.dumps({"prompt_id": rec["prompt_id"], "variant": rec["variant"], "embedding": emb.tolist()}) + "\n")
            refined = refine_prompts(ps, provider, 0.5)
            self.assertTrue(refined.is_refined)
            self.assertTrue(np.allclose(refined.group_conditions(1)[2].embedding, np.eye(3)[1] + 0.1))

    def test_missing_response(self):
        ps = build_prompt_set(2, 3, 1)
        with tempfile.TemporaryDirectory() as tmp:
            Path(tmp, "responses.jsonl").write_text(
                json.dumps({"prompt_id": 0, "variant": 1, "embedding": [1.0, 0.0, 0.0]}) + "\n"
            )
            with self.assertLogs(level="ERROR"):
                with self.assertRaisesRegex(CurationError, "prompt 1"):
                    refine_prompts(ps, FileExchangeProvider(tmp), 0.5)


class TestGenerateAndScore(unittest.TestCase):
    def setUp(self) -> None:
        self.rm = SyntheticRewardModel(TARGETS)
        self.ps = refine_prompts(build_prompt_set(6, 3, 4), PerturbationProvider(0.5, master=3), 0.5)

    def test_scores_use_original_condition(self):
        pool = generate_and_score(self.ps, FixedSource(), self.rm, CompositeWeights(), master=42)
        self.assertEqual(len(pool.groups), 6)
        for g in pool.groups:
            original = self.ps.original(g.prompt_id)
            self.assertEqual(g.rewards.shape, (5, 3))
            for j, smp in enumerate(g.samples):
                self.assertEqual(smp.condition_ref, (g.prompt_id, j))
                expected = self.rm.score_vector(smp.x0, original).as_array()
                self.assertTrue(np.array_equal(g.rewards[j], expected))
        self.assertEqual(pool.scaler.count, 30)

    def test_seeds_are_derived_per_sample(self):
        a, b = FixedSource(), FixedSource()
        generate_and_score(self.ps, a, self.rm, CompositeWeights(), master=42)
        generate_and_score(self.ps, b, self.rm, CompositeWeights(), master=43)
        self.assertEqual(len(set(a.calls[0])), 30)
        self.assertNotEqual(a.calls[0], b.calls[0])

    def test_diverged_group_excluded(self):
        with self.assertLogs(level="WARNING"):
            pool = generate_and_score(self.ps, FixedSource(diverge_ids={2}), self.rm, CompositeWeights(), master=42)
        self.assertEqual([g.prompt_id for g in pool.groups], [0, 1, 3, 4, 5])
        self.assertEqual(pool.audit[0]["prompt_id"], 2)

    def test_unrefined_prompts_rejected(self):
        with self.assertRaises(CurationError):
            generate_and_score(build_prompt_set(2, 3, 1), FixedSource(), self.rm, CompositeWeights(), master=0)

    def test_rescored_keeps_scaler(self):
        pool = generate_and_score(self.ps, FixedSource(), self.rm, CompositeWeights(), master=42)
        h_only = pool.rescored(CompositeWeights(1.0, 0.0, 0.0))
        self.assertIs(h_only.scaler, pool.scaler)
        g = h_only.groups[0]
        expected = (g.rewards[:, 0] - pool.scaler.mean[0]) / pool.scaler.std[0]
        self.assertTrue(np.allclose(g.r_total, expected, rtol=1e-14, atol=1e-14))


class TestFilter(unittest.TestCase):
    def test_single_sample_must_win_every_channel(self):
        # sample 1 improves h only, sample 2 improves p only
        g = make_group(0, [[0, 0, 0], [1, -1, -1], [-1, 1, -1]])
        flags = filter_flags(g)
        self.assertTrue(flags["h"])
        self.assertTrue(flags["p"])
        self.assertFalse(flags["a"])
        self.assertFalse(flags["ha"])
        self.assertFalse(flags["hpa"])

    def test_ties_do_not_count(self):
        g = make_group(0, [[0, 0, 0], [0, 1, 1]])
        self.assertFalse(filter_flags(g)["h"])
        self.assertTrue(filter_flags(g)["pa"])

    def test_against_brute_force_and_nesting(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            groups = [make_group(i, rng.standard_normal((5, 3))) for i in range(20)]
            kept = {}
            for rule in FilterRule:
                ids = [g.prompt_id for g in apply_filter(groups, rule)]
                oracle = [g.prompt_id for g in groups if brute_force_retained(g.rewards, rule.value)]
                self.assertEqual(ids, oracle)
                kept[rule.value] = set(ids)
            self.assertLessEqual(kept["hpa"], kept["ha"])
            self.assertLessEqual(kept["ha"], kept["h"])
            self.assertLessEqual(kept["hpa"], kept["pa"])
            self.assertLessEqual(kept["pa"], kept["p"])

    def test_raw_and_z_scored_rewards_retain_the_same_groups(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            groups = [make_group(i, rng.normal([-3.0, -2.0, -0.5], [2.5, 1.8, 0.4], (5, 3))) for i in range(20)]
            scaler = fit_scaler(np.concatenate([g.rewards for g in groups]))
            scaled = [replace(g, rewards=scaler.transform(g.rewards)) for g in groups]
            for rule in FilterRule:
                raw_ids = [g.prompt_id for g in apply_filter(groups, rule)]
                z_ids = [g.prompt_id for g in apply_filter(scaled, rule)]
                self.assertEqual(raw_ids, z_ids, rule.value)

    def test_r_total_does_not_affect_retention(self):
        rng = np.random.default_rng(13)
        groups = [make_group(i, rng.standard_normal((5, 3))) for i in range(40)]
        shuffled = [replace(g, r_total=1e3 * rng.standard_normal(5)) for g in groups]
        for g, h in zip(groups, shuffled):
            self.assertEqual(filter_flags(g), filter_flags(h))
        for rule in FilterRule:
            self.assertEqual(
                [g.prompt_id for g in apply_filter(groups, rule)],
                [g.prompt_id for g in apply_filter(shuffled, rule)],
            )

    def test_parse_rule(self):
        self.assertIs(FilterRule.parse("HPA"), FilterRule.HPA)
        with self.assertRaises(CurationError):
            FilterRule.parse("hp")


class TestSelect(unittest.TestCase):
    def setUp(self) -> None:
        self.pool = [
            make_pair(3, 1, 0.5),
            make_pair(1, 2, 2.0),
            make_pair(1, 1, 2.0),
            make_pair(2, 4, -1.0),
            make_pair(0, 3, 1.0),
        ]

    def test_top_breaks_ties_by_key(self):
        result = select(self.pool, SelectionStrategy.parse("top:2"))
        self.assertEqual([p.key for p in result.pairs], [(1, 1), (1, 2)])
        result = select(self.pool, SelectionStrategy.parse("top:1"))
        self.assertEqual([p.key for p in result.pairs], [(1, 1)])

    def test_low(self):
        result = select(self.pool, SelectionStrategy.parse("low:2"))
        self.assertEqual([p.key for p in result.pairs], [(2, 4), (3, 1)])

    def test_all_sorted_by_key(self):
        result = select(self.pool, SelectionStrategy.parse("all"))
        self.assertEqual([p.key for p in result.pairs], [(0, 3), (1, 1), (1, 2), (2, 4), (3, 1)])

    def test_random_depends_on_seed_only(self):
        a = select(self.pool, SelectionStrategy.parse("random:3", seed=5))
        b = select(list(reversed(self.pool)), SelectionStrategy.parse("random:3", seed=5))
        self.assertEqual([p.key for p in a.pairs], [p.key for p in b.pairs])
        self.assertEqual(len(a.pairs), 3)

    def test_k_larger_than_pool(self):
        with self.assertLogs(level="WARNING"):
            result = select(self.pool, SelectionStrategy.parse("top:50"))
        self.assertEqual(len(result.pairs), 5)
        self.assertEqual(len(result.warnings), 1)

    def test_top_equals_all_at_pool_size(self):
        top = select(self.pool, SelectionStrategy.parse("top:5"))
        everything = select(self.pool, SelectionStrategy.parse("all"))
        self.assertEqual([p.key for p in top.pairs], [p.key for p in everything.pairs])

    def test_original_rejected(self):
        with self.assertRaises(CurationError):
            select(self.pool + [make_pair(4, 0, 9.0)], SelectionStrategy.parse("all"))

    def test_unannotated_rejected(self):
        with self.assertRaises(CurationError):
            select([make_pair(0, 1, 1.0, advantage=None)], SelectionStrategy.parse("all"))

    def test_parse_strategy(self):
        self.assertEqual(SelectionStrategy.parse("Top:50").name, "top:50")
        for bad in ("top", "top:0", "best:3", "random:x"):
            with self.assertRaises(CurationError):
                SelectionStrategy.parse(bad)


if __name__ == "__main__":
    unittest.main()
