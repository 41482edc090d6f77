"""
cli.py - Command-line surface of the curation, training, evaluation and verification pipeline

Features:

- Subcommands ``gen-data``, ``filter``, ``select``, ``train``, ``eval``, ``verify``,
  ``ablate`` and ``all`` (every stage in order).
- Flags ``--config PATH``, ``--seed U64``, ``--out DIR``, ``--rule``, ``--strategy``,
  ``--steps N``, ``-v/--verbose`` and ``-q/--quiet``. Overrides are applied before
  the config hash is taken.
- Each stage checks the header of every artifact it reads (format version, stage,
  config hash) and refuses to mix artifacts from different configurations.
- Exit status: 0 on success, 1 on contract, configuration or artifact errors and on
  failed verification checks, 2 on numeric failures, 3 while the file-exchange
  refinement provider waits for responses.

Usage example:

    craftalign all --config craft.toml --out ./craft_run
    craftalign train --steps 500 --out ./craft_run
    python -m craftalign verify --seed 7
"""

import argparse
import csv
import json
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Callable, Optional

from craftalign import __version__
from craftalign.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from craftalign.config import ConfigError, RunConfig, apply_overrides, config_hash, parse_config, serialize_config
from craftalign.curation import (
    CurationError,
    FileExchangeProvider,
    PerturbationProvider,
    RefinementPending,
    RefinementProvider,
    SelectionStrategy,
    apply_filter,
    build_prompt_set,
    generate_and_score,
    refine_prompts,
    select,
)
from craftalign.evaluation import (
    AblationContext,
    EvaluationError,
    ablate_reward_combos,
    ablate_selection,
    cell_rows,
    eval_prompt_set,
    evaluate,
    reward_model_from_config,
    seed_averages,
    vanilla_sft_baseline,
    win_rates,
)
from craftalign.manifest import (
    ManifestError,
    pairs_from_manifest,
    pool_from_manifest,
    read_manifest,
    write_pairs,
    write_pool,
)
from craftalign.model import DiffusionError, NumericError
from craftalign.rewards import RewardError
from craftalign.sampler import DiffusionSampler
from craftalign.schedule import ScheduleError
from craftalign.seeding import SeedError, derive_seed, name_index
from craftalign.trainer import AdvantageTable, TrainerError, TrainingAborted, pretrain, renormalize_selected, train
from craftalign.verifier import VerificationError, run_verification

__all__ = [
    "SUBCOMMANDS",
    "EXIT_OK",
    "EXIT_CONTRACT",
    "EXIT_NUMERIC",
    "EXIT_PENDING",
    "Pipeline",
    "build_parser",
    "run_pipeline",
    "main",
]

SUBCOMMANDS = ("gen-data", "filter", "select", "train", "eval", "verify", "ablate", "all")
EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_NUMERIC = 2
EXIT_PENDING = 3

CANDIDATES = "candidates.jsonl"
FILTERED = "filtered.jsonl"
DATASET = "dataset.jsonl"
BASE = "base.crft"
FINAL = "final.crft"


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logging.info(f"Wrote {path}")


def _write_csv(path: Path, rows: Sequence[dict[str, Any]], fields: Sequence[str]) -> None:
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    logging.info(f"Wrote {path} ({len(rows)} rows)")


class Pipeline:
    """
    The pipeline stages over one output directory.

    Args:
        cfg: Run configuration (overrides already applied).
        out_dir: Directory for every artifact.
    """

    def __init__(self, cfg: RunConfig, out_dir: Path) -> None:
        self.cfg = cfg
        self.out = Path(out_dir)
        self.hash = config_hash(cfg)
        self.schedule = cfg.diffusion.schedule()
        self.master = cfg.seed
        self.out.mkdir(parents=True, exist_ok=True)

    def _checkpoint(self, name: str) -> Checkpoint:
        ckpt = load_checkpoint(self.out / name)
        if ckpt.config_hash != self.hash:
            logging.error(f"{name} was produced by config {ckpt.config_hash}, current config is {self.hash}")
            raise ManifestError(
                f"{self.out / name} was produced by config {ckpt.config_hash}, not {self.hash}; "
                "refusing to mix artifacts."
            )
        return ckpt

    def _base(self) -> Checkpoint:
        path = self.out / BASE
        if path.exists():
            return self._checkpoint(BASE)
        arch = self.cfg.architecture()
        result = pretrain(self.cfg.base, arch, self.schedule, self.master, config_hash=self.hash)
        save_checkpoint(path, result.final)
        return result.final

    def _provider(self) -> RefinementProvider:
        cur = self.cfg.curation
        if cur.provider == "file":
            return FileExchangeProvider(self.out / cur.exchange_dir)
        return PerturbationProvider(cur.radius, self.master)

    def gen_data(self) -> None:
        cfg = self.cfg
        cur = cfg.curation
        base = self._base()
        prompts = build_prompt_set(cur.num_prompts, cfg.rewards.num_classes, cur.refinements)
        prompts = refine_prompts(prompts, self._provider(), cur.radius)
        source = DiffusionSampler(base.params, self.schedule, bound=cfg.diffusion.sample_bound)
        pool = generate_and_score(prompts, source, reward_model_from_config(cfg), cfg.rewards.weights(), self.master)
        write_pool(self.out / CANDIDATES, pool, self.hash)
        (self.out / "config.toml").write_text(serialize_config(cfg), encoding="utf-8")
        logging.info(f"Wrote {self.out / 'config.toml'}")

    def filter(self) -> None:
        cur = self.cfg.curation
        header, records = read_manifest(self.out / CANDIDATES, stage="candidates", config_hash=self.hash)
        pool = pool_from_manifest(header, records)
        rule = cur.filter_rule()
        kept = apply_filter(pool.groups, rule)
        table = AdvantageTable.from_groups(kept, cur.advantage_eps)
        pairs = table.annotate(kept)
        residuals = table.zero_sum_residuals()
        logging.info(f"Rule {rule.value} retained {len(kept)} of {len(pool.groups)} groups")
        write_pairs(
            self.out / FILTERED,
            "filtered",
            pairs,
            header,
            meta={
                "rule": rule.value,
                "retained_groups": len(kept),
                "candidate_groups": len(pool.groups),
                "zero_sum_max": max(residuals.values(), default=0.0),
            },
        )

    def select(self) -> None:
        cur = self.cfg.curation
        header, records = read_manifest(self.out / FILTERED, stage="filtered", config_hash=self.hash)
        pairs = pairs_from_manifest(records)
        strategy = SelectionStrategy.parse(
            cur.strategy, seed=derive_seed(self.master, "select", (name_index(cur.strategy),))
        )
        result = select(pairs, strategy)
        chosen = list(result.pairs)
        if cur.renormalize_after_selection:
            chosen = renormalize_selected(chosen, cur.advantage_eps)
        write_pairs(
            self.out / DATASET,
            "dataset",
            chosen,
            header,
            meta={
                "rule": header.meta.get("rule", cur.rule),
                "strategy": strategy.name,
                "renormalized": cur.renormalize_after_selection,
                "warnings": list(result.warnings),
            },
        )

    def train(self) -> None:
        header, records = read_manifest(self.out / DATASET, stage="dataset", config_hash=self.hash)
        dataset = pairs_from_manifest(records)
        base = self._checkpoint(BASE)
        ckpt_dir = self.out / "checkpoints"
        try:
            result = train(
                self.cfg.training,
                dataset,
                base,
                self.schedule,
                self.master,
                rule=self.cfg.curation.filter_rule(),
                config_hash=self.hash,
                checkpoint_dir=ckpt_dir,
            )
        except TrainingAborted as exc:
            save_checkpoint(ckpt_dir / "last_good.crft", exc.last_good)
            raise
        save_checkpoint(self.out / FINAL, result.final)
        log_path = self.out / "train_log.jsonl"
        log_path.write_text(
            "".join(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n" for rec in result.log),
            encoding="utf-8",
        )
        logging.info(f"Wrote {log_path}")

    def eval(self) -> None:
        cfg = self.cfg
        header, records = read_manifest(self.out / CANDIDATES, stage="candidates", config_hash=self.hash)
        pool = pool_from_manifest(header, records)
        final = self._checkpoint(FINAL)
        base = self._checkpoint(BASE)
        prompts = eval_prompt_set(cfg)
        rm = reward_model_from_config(cfg)
        train_ids = range(cfg.curation.num_prompts)
        reports = {}
        for name, ckpt in (("model", final), ("base", base)):
            source = DiffusionSampler(ckpt.params, self.schedule, bound=cfg.diffusion.sample_bound)
            reports[name] = evaluate(
                source, prompts, rm, pool.scaler, cfg.rewards.weights(),
                cfg.evaluation.K_per_prompt, self.master, train_ids=train_ids,
            )
        wins = win_rates(reports["model"], reports["base"])
        logging.info(
            f"Composite mean {reports['model'].composite_mean:.4f} vs base "
            f"{reports['base'].composite_mean:.4f}; win rate {wins.rates['composite']:.3f}"
        )
        _write_json(
            self.out / "eval_report.json",
            {
                "config_hash": self.hash,
                "model": reports["model"].to_dict(),
                "base": reports["base"].to_dict(),
                "win_rates": wins.to_dict(),
            },
        )
        rows = []
        for name, rep in reports.items():
            rows.append(
                {
                    "model": name,
                    "mean_h": rep.mean_raw[0],
                    "mean_p": rep.mean_raw[1],
                    "mean_a": rep.mean_raw[2],
                    "scaled_h": rep.mean_scaled[0],
                    "scaled_p": rep.mean_scaled[1],
                    "scaled_a": rep.mean_scaled[2],
                    "composite_mean": rep.composite_mean,
                    "count": rep.count,
                    "excluded": rep.excluded,
                    "win_rate": wins.rates["composite"] if name == "model" else "",
                }
            )
        _write_csv(self.out / "eval_report.csv", rows, list(rows[0]))

    def verify(self) -> bool:
        report = run_verification(self.cfg, self.master)
        data = report.to_dict()
        data["config_hash"] = self.hash
        _write_json(self.out / "verification.json", data)
        _write_csv(self.out / "eta_residuals.csv", list(report.eta_rows), ["eta", "residual", "fitted"])
        return report.passed

    def ablate(self) -> None:
        cfg = self.cfg
        header, records = read_manifest(self.out / CANDIDATES, stage="candidates", config_hash=self.hash)
        ctx = AblationContext(
            cfg=cfg,
            pool=pool_from_manifest(header, records),
            base=self._checkpoint(BASE),
            eval_prompts=eval_prompt_set(cfg),
        )
        grids = {
            "selection": ablate_selection(ctx, cfg.evaluation.strategies),
            "rewards": ablate_reward_combos(ctx, cfg.evaluation.rules),
            "sft": vanilla_sft_baseline(ctx),
        }
        summary: dict[str, Any] = {"config_hash": self.hash, "seeds": list(cfg.evaluation.seeds)}
        for name, cells in grids.items():
            rows = cell_rows(cells)
            if rows:
                _write_csv(self.out / f"ablation_{name}.csv", rows, list(rows[0]))
            summary[name] = seed_averages(cells)
        _write_json(self.out / "ablation.json", summary)


def _stages(pipeline: Pipeline) -> dict[str, Callable[[], Any]]:
    return {
        "gen-data": pipeline.gen_data,
        "filter": pipeline.filter,
        "select": pipeline.select,
        "train": pipeline.train,
        "eval": pipeline.eval,
        "verify": pipeline.verify,
        "ablate": pipeline.ablate,
    }


def run_pipeline(subcommand: str, cfg: RunConfig, out_dir: Path) -> int:
    """
    Run one subcommand (``all`` chains every stage) and return the exit status.

    Library errors propagate; ``main`` maps them to exit codes. Only a failed
    verification check is reported through the return value.
    """
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"Unknown subcommand '{subcommand}'.")
    pipeline = Pipeline(cfg, out_dir)
    stages = _stages(pipeline)
    names = list(stages) if subcommand == "all" else [subcommand]
    status = EXIT_OK
    for name in names:
        logging.info(f"Stage {name} (config {pipeline.hash})")
        outcome = stages[name]()
        if name == "verify" and outcome is False:
            logging.error("Verification checks failed")
            status = EXIT_CONTRACT
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="craftalign",
        description="Composite reward filtering and advantage-weighted fine-tuning of a toy diffusion model.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("subcommand", choices=SUBCOMMANDS, help="Pipeline stage to run.")
    parser.add_argument("--config", type=Path, default=None, help="TOML config file (defaults apply when omitted).")
    parser.add_argument("--seed", type=int, default=None, help="Master seed, overrides the config.")
    parser.add_argument("--out", type=Path, default=Path("craft_run"), help="Output directory (default ./craft_run).")
    parser.add_argument("--rule", choices=["h", "p", "a", "ha", "pa", "hpa"], default=None, help="Filter rule override.")
    parser.add_argument("--strategy", default=None, help="Selection strategy override: top:K, random:K, low:K or all.")
    parser.add_argument("--steps", type=int, default=None, help="Training steps override.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level.")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Log warnings and errors only.")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    elif args.quiet:
        logging.getLogger().setLevel(logging.WARNING)
    try:
        cfg = apply_overrides(
            parse_config(args.config), seed=args.seed, rule=args.rule, strategy=args.strategy, steps=args.steps
        )
        return run_pipeline(args.subcommand, cfg, args.out)
    except RefinementPending as exc:
        logging.warning(str(exc))
        return EXIT_PENDING
    except (TrainingAborted, NumericError, VerificationError) as exc:
        logging.error(f"Numeric failure: {exc}")
        return EXIT_NUMERIC
    except (
        ConfigError,
        ManifestError,
        CheckpointError,
        CurationError,
        TrainerError,
        RewardError,
        DiffusionError,
        SeedError,
        ScheduleError,
        EvaluationError,
    ) as exc:
        logging.error(f"{type(exc).__name__}: {exc}")
        return EXIT_CONTRACT
