import os
import sys
import tempfile
import unittest
from pathlib import Path

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

from craftalign.config import (
    ConfigError,
    RunConfig,
    TrainConfig,
    apply_overrides,
    config_hash,
    load_config,
    parse_config,
    serialize_config,
)


class TestParseConfig(unittest.TestCase):
    def _parse_text(self, text: str) -> RunConfig:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp, "craft.toml")
            path.write_text(text, encoding="utf-8")
            return parse_config(path)

    def test_empty_file_gives_defaults(self):
        cfg = self._parse_text("")
        self.assertEqual(cfg, RunConfig())
        self.assertEqual(cfg.seed, 42)
        self.assertEqual(cfg.diffusion.T, 50)
        self.assertEqual(cfg.curation.refinements, 4)
        self.assertEqual((cfg.rewards.alpha_h, cfg.rewards.alpha_p, cfg.rewards.alpha_a), (0.4, 0.4, 0.2))

    def test_ablation_defaults_cover_every_rule(self):
        cfg = RunConfig()
        self.assertEqual(cfg.evaluation.rules, ("h", "p", "ha", "hpa"))
        self.assertEqual(cfg.evaluation.strategies, ("top:50", "random:50", "low:50", "all"))
        self.assertEqual((cfg.rewards.aesthetic_lambda, cfg.rewards.noise_amp), (1.0, 0.3))
        self.assertEqual(cfg.training.total_steps, 500)

    def test_sections_override_defaults(self):
        cfg = self._parse_text("seed = 7\n[training]\nlearning_rate = 0.01\ntotal_steps = 20\n")
        self.assertEqual(cfg.seed, 7)
        self.assertEqual(cfg.training.learning_rate, 0.01)
        self.assertEqual(cfg.training.total_steps, 20)
        self.assertEqual(cfg.training.minibatch_size, 16)

    def test_weights_must_sum_to_one(self):
        with self.assertLogs(level="ERROR"):
            with self.assertRaisesRegex(ConfigError, "rewards"):
                self._parse_text("[rewards]\nalpha_h = 0.5\nalpha_p = 0.5\nalpha_a = 0.1\n")

    def test_unknown_key_rejected_with_path(self):
        with self.assertLogs(level="ERROR"):
            with self.assertRaisesRegex(ConfigError, "training.learnin_rate"):
                self._parse_text("[training]\nlearnin_rate = 0.1\n")

    def test_invalid_toml(self):
        with self.assertLogs(level="ERROR"):
            with self.assertRaises(ConfigError):
                self._parse_text("[training\n")

    def test_missing_file(self):
        with self.assertLogs(level="ERROR"):
            with self.assertRaises(ConfigError):
                parse_config("/nonexistent/craft.toml")

    def test_none_gives_defaults(self):
        self.assertEqual(parse_config(None), RunConfig())

    def test_bad_values(self):
        for data in (
            {"diffusion": {"time_dim": 3}},
            {"diffusion": {"beta_start": 0.1, "beta_end": 0.01}},
            {"curation": {"rule": "hp"}},
            {"curation": {"strategy": "best:3"}},
            {"verification": {"eta_grid": [0.01, 0.1]}},
            {"rewards": {"targets": [[1.0, 0.0, 0.0]]}, "base": {"means": [[0.0, 0.0, 0.0]]}},
            {"base": {"means": [[0.0, 0.0]]}},
            {"training": {"learning_rate": 0.0}},
        ):
            with self.subTest(data=data):
                with self.assertLogs(level="ERROR"):
                    with self.assertRaises(ConfigError):
                        load_config(data)

    def test_frozen(self):
        cfg = RunConfig()
        with self.assertRaises(Exception):
            cfg.seed = 1  # type: ignore[misc]


class TestSerialization(unittest.TestCase):
    def test_round_trip(self):
        cfg = load_config(
            {
                "seed": 123,
                "training": {"learning_rate": 0.002, "seed": 9},
                "curation": {"strategy": "random:20", "rule": "ha"},
                "evaluation": {"cell_steps": {"top:50": 40}},
            }
        )
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp, "round.toml")
            path.write_text(serialize_config(cfg), encoding="utf-8")
            self.assertEqual(parse_config(path), cfg)

    def test_hash_is_stable_and_sensitive(self):
        a = RunConfig()
        self.assertEqual(config_hash(a), config_hash(RunConfig()))
        self.assertEqual(len(config_hash(a)), 16)
        int(config_hash(a), 16)
        self.assertNotEqual(config_hash(a), config_hash(apply_overrides(a, seed=43)))

    def test_overrides(self):
        cfg = apply_overrides(RunConfig(), seed=5, rule="P", strategy="low:10", steps=12)
        self.assertEqual(cfg.seed, 5)
        self.assertEqual(cfg.curation.rule, "p")
        self.assertEqual(cfg.curation.strategy, "low:10")
        self.assertEqual(cfg.training.total_steps, 12)

    def test_bad_override(self):
        with self.assertLogs(level="ERROR"):
            with self.assertRaises(ConfigError):
                apply_overrides(RunConfig(), strategy="top:0")


class TestTrainConfig(unittest.TestCase):
    def test_full_scale_preset(self):
        preset = TrainConfig.full_scale_preset()
        self.assertEqual(preset.learning_rate, 5e-5)
        self.assertEqual(preset.effective_batch, 128)

    def test_architecture_from_config(self):
        arch = RunConfig().architecture()
        self.assertEqual((arch.data_dim, arch.cond_dim), (2, 3))


if __name__ == "__main__":
    unittest.main()
