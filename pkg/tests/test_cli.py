import contextlib
import csv
import io
import json
import logging
import os
import sys
import tempfile
import unittest
from pathlib import Path

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src')))

from craftalign.cli import EXIT_CONTRACT, EXIT_OK, EXIT_PENDING, SUBCOMMANDS, build_parser, main
from craftalign.config import parse_config

TINY_CONFIG = """\
seed = 5

[diffusion]
time_dim = 2
hidden = [4, 4]

[base]
samples_per_class = 10

[base.training]
total_steps = 5
minibatch_size = 8
log_every = 5

[curation]
num_prompts = 12
refinements = 2
rule = "h"
strategy = "all"

[training]
total_steps = 3
minibatch_size = 4
log_every = 1
checkpoint_every = 2

[evaluation]
num_prompts = 4
K_per_prompt = 1
seeds = [1]
strategies = ["top:2", "all"]
rules = ["h"]
reference_size = 12
"""

SLOW = os.environ.get("CRAFT_SLOW_TESTS") == "1"


class TestParser(unittest.TestCase):
    def test_defaults(self):
        args = build_parser().parse_args(["verify"])
        self.assertEqual(args.subcommand, "verify")
        self.assertEqual(args.out, Path("craft_run"))
        self.assertIsNone(args.config)
        self.assertIsNone(args.seed)
        self.assertFalse(args.verbose or args.quiet)

    def test_overrides(self):
        args = build_parser().parse_args(
            ["train", "--seed", "7", "--rule", "ha", "--strategy", "low:10", "--steps", "20", "--out", "/tmp/x", "-q"]
        )
        self.assertEqual((args.seed, args.rule, args.strategy, args.steps), (7, "ha", "low:10", 20))
        self.assertTrue(args.quiet)

    def test_every_subcommand_accepted(self):
        for name in SUBCOMMANDS:
            with self.subTest(name=name):
                self.assertEqual(build_parser().parse_args([name]).subcommand, name)

    def test_rejections(self):
        for argv in (["fit"], ["train", "--rule", "x"], ["train", "-v", "-q"], []):
            with self.subTest(argv=argv):
                with contextlib.redirect_stderr(io.StringIO()):
                    with self.assertRaises(SystemExit) as ctx:
                        build_parser().parse_args(argv)
                self.assertEqual(ctx.exception.code, 2)


class TestMainErrors(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def write_config(self, text: str) -> str:
        path = self.root / "craft.toml"
        path.write_text(text, encoding="utf-8")
        return str(path)

    def test_bad_config_is_contract_error(self):
        cfg = self.write_config("[training]\nlearnin_rate = 0.1\n")
        with self.assertLogs(level="ERROR"):
            self.assertEqual(main(["verify", "--config", cfg, "--out", str(self.root / "out")]), EXIT_CONTRACT)

    def test_missing_upstream_artifact(self):
        with self.assertLogs(level="ERROR"):
            self.assertEqual(main(["filter", "--out", str(self.root / "out")]), EXIT_CONTRACT)

    def test_bad_strategy_override(self):
        with self.assertLogs(level="ERROR"):
            self.assertEqual(main(["select", "--strategy", "best:3", "--out", str(self.root / "out")]), EXIT_CONTRACT)

    def test_file_provider_waits_for_responses(self):
        cfg = self.write_config(TINY_CONFIG.replace('rule = "h"', 'rule = "h"\nprovider = "file"'))
        out = self.root / "out"
        with self.assertLogs(level="WARNING"):
            self.assertEqual(main(["gen-data", "--config", cfg, "--out", str(out)]), EXIT_PENDING)
        self.assertTrue((out / "refine_exchange").is_dir())
        self.assertFalse((out / "candidates.jsonl").exists())


class TestEndToEnd(unittest.TestCase):
    def setUp(self) -> None:
        self.level = logging.getLogger().level
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.cfg = self.root / "craft.toml"
        self.cfg.write_text(TINY_CONFIG, encoding="utf-8")

    def tearDown(self) -> None:
        logging.getLogger().setLevel(self.level)
        self.tmp.cleanup()

    def run_all(self, name: str) -> Path:
        out = self.root / name
        self.assertEqual(main(["all", "--config", str(self.cfg), "--out", str(out), "-q"]), EXIT_OK)
        return out

    def test_all_stages(self):
        out = self.run_all("run")
        for name in (
            "base.crft", "candidates.jsonl", "filtered.jsonl", "dataset.jsonl", "final.crft",
            "train_log.jsonl", "eval_report.json", "eval_report.csv", "verification.json",
            "eta_residuals.csv", "ablation.json", "ablation_selection.csv", "config.toml",
        ):
            self.assertTrue((out / name).exists(), name)
        self.assertTrue((out / "checkpoints" / "step_000002.crft").exists())
        self.assertEqual(len((out / "train_log.jsonl").read_text(encoding="utf-8").splitlines()), 3)

        report = json.loads((out / "eval_report.json").read_text(encoding="utf-8"))
        self.assertEqual(report["model"]["num_prompts"], 4)
        self.assertEqual(set(report["win_rates"]["rates"]), {"h", "p", "a", "composite"})
        with (out / "eval_report.csv").open(encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
        self.assertEqual([r["model"] for r in rows], ["model", "base"])

        self.assertTrue(json.loads((out / "verification.json").read_text(encoding="utf-8"))["passed"])
        ablation = json.loads((out / "ablation.json").read_text(encoding="utf-8"))
        self.assertEqual(set(ablation["sft"]), {"craft", "vanilla-sft"})
        self.assertEqual(parse_config(out / "config.toml").seed, 5)

        with self.assertLogs(level="ERROR"):
            self.assertEqual(
                main(["train", "--config", str(self.cfg), "--out", str(out), "--seed", "6", "-q"]), EXIT_CONTRACT
            )

    @unittest.skipUnless(SLOW, "set CRAFT_SLOW_TESTS=1 to run")
    def test_reruns_are_bitwise_identical(self):
        a = self.run_all("a")
        b = self.run_all("b")
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        self.assertEqual(files_a, files_b)
        names = {str(p) for p in files_a}
        for name in (
            "filtered.jsonl", "ablation.json", "ablation_selection.csv", "ablation_rewards.csv",
            "ablation_sft.csv", "eval_report.csv", "eta_residuals.csv", "train_log.jsonl", "config.toml",
        ):
            self.assertIn(name, names)
        for rel in files_a:
            self.assertEqual((a / rel).read_bytes(), (b / rel).read_bytes(), str(rel))


if __name__ == "__main__":
    unittest.main()
