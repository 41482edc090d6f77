"""
evaluation.py - Held-out evaluation, win rates and ablation grids

Features:

- ``evaluate()``: K samples per held-out prompt, scored against the original
  condition; per-channel means (raw and scaled), composite mean and per-prompt
  tables. Diverged samples are excluded and counted.
- ``win_rate()`` / ``win_rates()``: fraction of prompts where the model's per-prompt
  mean beats the base model's; ties count 0.5. Both models are sampled with the
  same seeds per (prompt, k).
- ``build_dataset()``: filter, annotate, select (and optionally re-normalize) a
  training set from a candidate pool.
- ``ablate_selection()``, ``ablate_reward_combos()``, ``vanilla_sft_baseline()``:
  one trained model and report per grid cell and seed; a failing cell is recorded,
  not raised.
- Custom exception: ``EvaluationError``.

Usage example:

    from craftalign.evaluation import AblationContext, ablate_selection, evaluate, win_rates

    report = evaluate(DiffusionSampler(final.params, s), eval_prompts, rm, pool.scaler,
                      CompositeWeights(), K=4, master=42, train_ids=train_prompts.ids)
    table = win_rates(report, base_report)
    cells = ablate_selection(AblationContext(cfg, pool, base_ckpt, eval_prompts), ["top:50", "all"])
"""

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from typing import Any, Optional

import numpy as np

from craftalign.checkpoint import Checkpoint
from craftalign.config import RunConfig
from craftalign.curation import (
    CandidatePool,
    FilterRule,
    PromptSet,
    SelectionResult,
    SelectionStrategy,
    TrainingPair,
    apply_filter,
    build_prompt_set,
    select,
)
from craftalign.model import Condition
from craftalign.rewards import (
    REWARD_IDS,
    CompositeWeights,
    RewardModelInterface,
    RewardScaler,
    SyntheticRewardModel,
    composite_array,
)
from craftalign.sampler import DiffusionSampler, SampleSource
from craftalign.seeding import derive_seed, name_index
from craftalign.trainer import AdvantageTable, renormalize_selected, train

__all__ = [
    "EvaluationError",
    "CHANNELS",
    "EvalReport",
    "WinRateTable",
    "AblationCell",
    "AblationContext",
    "evaluate",
    "win_rate",
    "win_rates",
    "eval_prompt_set",
    "reward_model_from_config",
    "build_dataset",
    "budget_steps",
    "ablate_selection",
    "ablate_reward_combos",
    "vanilla_sft_baseline",
    "seed_averages",
    "cell_rows",
]

CHANNELS = REWARD_IDS + ("composite",)


class EvaluationError(Exception):
    """Custom exception for evaluation and ablation errors."""
    pass


@dataclass(frozen=True, eq=False)
class EvalReport:
    """
    Attributes:
        mean_raw: Mean raw reward per channel (h, p, a).
        mean_scaled: Mean scaled reward per channel.
        composite_mean: Mean composite reward.
        count: Number of scored samples.
        excluded: Number of diverged samples left out.
        seed: Master seed of the sampling streams.
        prompt_ids: Held-out prompt ids, in order.
        per_prompt: (num_prompts, 4) per-prompt means of h, p, a and composite
            (nan where every sample of the prompt diverged).
    """
    mean_raw: tuple[float, float, float]
    mean_scaled: tuple[float, float, float]
    composite_mean: float
    count: int
    excluded: int
    seed: int
    prompt_ids: tuple[int, ...]
    per_prompt: np.ndarray

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean_raw": dict(zip(REWARD_IDS, self.mean_raw)),
            "mean_scaled": dict(zip(REWARD_IDS, self.mean_scaled)),
            "composite_mean": self.composite_mean,
            "count": self.count,
            "excluded": self.excluded,
            "seed": self.seed,
            "num_prompts": len(self.prompt_ids),
        }


@dataclass(frozen=True)
class WinRateTable:
    """Win rate per channel (h, p, a, composite); ties count ``tie_value``."""
    rates: dict[str, float]
    prompts: int
    tie_value: float = 0.5

    def to_dict(self) -> dict[str, Any]:
        return {"rates": dict(self.rates), "prompts": self.prompts, "tie_value": self.tie_value}


@dataclass(frozen=True, eq=False)
class AblationCell:
    """
    One grid cell for one seed.

    ``status`` is ``"ok"``, ``"empty"`` (nothing survived filtering) or ``"error"``.
    """
    name: str
    seed: int
    steps: int
    dataset_size: int
    status: str
    report: Optional[EvalReport] = None
    error: Optional[str] = None


@dataclass(frozen=True, eq=False)
class AblationContext:
    """
    Inputs shared by every cell of an ablation grid.

    Attributes:
        cfg: Run configuration.
        pool: Scored candidate pool (shared across cells).
        base: Base model checkpoint that every cell fine-tunes.
        eval_prompts: Held-out prompts.
        reward_model: Reward model; built from ``cfg.rewards`` when omitted.
    """
    cfg: RunConfig
    pool: CandidatePool
    base: Checkpoint
    eval_prompts: PromptSet
    reward_model: Optional[RewardModelInterface] = None

    @property
    def rewards(self) -> RewardModelInterface:
        return self.reward_model or reward_model_from_config(self.cfg)

    @property
    def train_ids(self) -> list[int]:
        """Every generated curation prompt id, audit-excluded groups included."""
        ids = set(range(self.cfg.curation.num_prompts))
        ids.update(g.prompt_id for g in self.pool.groups)
        ids.update(int(rec["prompt_id"]) for rec in self.pool.audit)
        return sorted(ids)


def reward_model_from_config(cfg: RunConfig) -> SyntheticRewardModel:
    r = cfg.rewards
    return SyntheticRewardModel(r.targets, aesthetic_lambda=r.aesthetic_lambda, noise_amp=r.noise_amp)


def eval_prompt_set(cfg: RunConfig) -> PromptSet:
    """Held-out prompts: ids start right after the curation prompt ids."""
    return build_prompt_set(
        cfg.evaluation.num_prompts,
        cfg.rewards.num_classes,
        refinements=1,
        id_offset=cfg.curation.num_prompts,
    )


def evaluate(
    source: SampleSource,
    prompts: PromptSet,
    reward_model: RewardModelInterface,
    scaler: RewardScaler,
    weights: CompositeWeights,
    K: int,
    master: int,
    train_ids: Iterable[int] = (),
) -> EvalReport:
    """
    Sample K times per held-out prompt and aggregate rewards against the originals.

    Sample (i, k) uses seed ``derive_seed(master, "eval", (i, k))``, so two models
    evaluated with the same master see the same noise.

    Args:
        source: Model to evaluate.
        prompts: Held-out prompts (originals are used).
        reward_model: Reward model.
        scaler: Scaler of the curation pool.
        weights: Composite weights.
        K: Samples per prompt (>= 1).
        master: Master seed.
        train_ids: Curation prompt ids; must not intersect ``prompts``.

    Returns:
        EvalReport: Aggregated rewards.

    Raises:
        EvaluationError: On overlapping prompt ids, K < 1 or no valid sample.
    """
    if K < 1:
        raise EvaluationError("K_per_prompt must be >= 1.")
    overlap = set(prompts.ids) & set(train_ids)
    if overlap:
        logging.error(f"Evaluation prompts overlap curation prompts: {sorted(overlap)[:5]}")
        raise EvaluationError(f"{len(overlap)} evaluation prompt ids are also curation prompt ids.")
    conds: list[Condition] = []
    seeds: list[int] = []
    for c in prompts.originals:
        for k in range(K):
            conds.append(c)
            seeds.append(derive_seed(master, "eval", (c.id, k)))
    x0, diverged = source.generate(conds, seeds)
    raw = np.full((len(conds), 3), np.nan)
    for n, c in enumerate(conds):
        if not diverged[n]:
            raw[n] = reward_model.score_vector(x0[n], c).as_array()
    valid = ~np.asarray(diverged, dtype=bool)
    if not valid.any():
        logging.error("Every evaluation sample diverged")
        raise EvaluationError("No valid evaluation samples.")
    excluded = int((~valid).sum())
    if excluded:
        logging.warning(f"Excluded {excluded} diverged evaluation samples")
    totals = np.full(len(conds), np.nan)
    totals[valid] = composite_array(raw[valid], scaler, weights)
    scaled = scaler.transform(raw[valid])
    per_sample = np.column_stack([raw, totals]).reshape(len(prompts.originals), K, 4)
    with np.errstate(invalid="ignore"):
        counts = np.sum(~np.isnan(per_sample[:, :, 0]), axis=1)
        per_prompt = np.where(counts[:, None] > 0, np.nansum(per_sample, axis=1) / np.maximum(counts, 1)[:, None], np.nan)
    return EvalReport(
        mean_raw=tuple(float(v) for v in raw[valid].mean(axis=0)),  # type: ignore[arg-type]
        mean_scaled=tuple(float(v) for v in scaled.mean(axis=0)),  # type: ignore[arg-type]
        composite_mean=float(totals[valid].mean()),
        count=int(valid.sum()),
        excluded=excluded,
        seed=master,
        prompt_ids=tuple(prompts.ids),
        per_prompt=per_prompt,
    )


def win_rate(model: EvalReport, base: EvalReport, which: str = "composite") -> float:
    """
    Fraction of prompts where the model's per-prompt mean beats the base; ties count 0.5.

    Raises:
        EvaluationError: If the reports cover different prompts or ``which`` is unknown.
    """
    if which not in CHANNELS:
        raise EvaluationError(f"Unknown reward channel '{which}'.")
    if model.prompt_ids != base.prompt_ids:
        raise EvaluationError("Win rates need reports over the same prompts.")
    col = CHANNELS.index(which)
    a = model.per_prompt[:, col]
    b = base.per_prompt[:, col]
    both = ~(np.isnan(a) | np.isnan(b))
    if not both.any():
        raise EvaluationError("No prompt has valid samples under both models.")
    a, b = a[both], b[both]
    wins = np.sum(a > b) + 0.5 * np.sum(a == b)
    return float(wins / a.size)


def win_rates(model: EvalReport, base: EvalReport) -> WinRateTable:
    rates = {ch: win_rate(model, base, ch) for ch in CHANNELS}
    both = ~(np.isnan(model.per_prompt[:, 3]) | np.isnan(base.per_prompt[:, 3]))
    return WinRateTable(rates=rates, prompts=int(both.sum()))


def build_dataset(
    pool: CandidatePool,
    rule: FilterRule,
    strategy: SelectionStrategy,
    eps: float = 1e-8,
    renormalize: bool = False,
) -> SelectionResult:
    """
    Filter the pool under ``rule``, attach group advantages and select the training set.
    """
    kept = apply_filter(pool.groups, rule)
    pairs = AdvantageTable.from_groups(kept, eps).annotate(kept)
    result = select(pairs, strategy)
    if renormalize:
        result = replace(result, pairs=tuple(renormalize_selected(result.pairs, eps)))
    return result


def budget_steps(cfg: RunConfig, name: str, dataset_size: int) -> int:
    """
    Steps for a cell: ``evaluation.cell_steps[name]`` if set, else
    round(training.total_steps * sqrt(dataset_size / reference_size)).
    """
    if name in cfg.evaluation.cell_steps:
        return int(cfg.evaluation.cell_steps[name])
    if dataset_size == 0:
        return 0
    ratio = dataset_size / cfg.evaluation.reference_size
    return max(1, int(round(cfg.training.total_steps * math.sqrt(ratio))))


def _strategy(name: str, master: int) -> SelectionStrategy:
    return SelectionStrategy.parse(name, seed=derive_seed(master, "select", (name_index(name),)))


def _run_cell(
    ctx: AblationContext,
    name: str,
    seed: int,
    dataset: Sequence[TrainingPair],
    rule: FilterRule,
    vanilla: bool = False,
    steps: Optional[int] = None,
) -> AblationCell:
    steps = budget_steps(ctx.cfg, name, len(dataset)) if steps is None else steps
    cfg = ctx.cfg
    s = cfg.diffusion.schedule()
    try:
        result = train(
            cfg.training.model_copy(update={"total_steps": steps, "seed": None}),
            dataset,
            ctx.base,
            s,
            seed,
            rule=rule,
            vanilla=vanilla,
        )
        source = DiffusionSampler(result.final.params, s, bound=cfg.diffusion.sample_bound)
        report = evaluate(
            source,
            ctx.eval_prompts,
            ctx.rewards,
            ctx.pool.scaler,
            cfg.rewards.weights(),
            cfg.evaluation.K_per_prompt,
            seed,
            train_ids=ctx.train_ids,
        )
    except Exception as exc:  # noqa: BLE001
        logging.error(f"Ablation cell {name} (seed {seed}) failed: {exc}")
        return AblationCell(name, seed, steps, len(dataset), "error", error=str(exc))
    logging.info(f"Ablation cell {name} (seed {seed}): composite {report.composite_mean:.4f}")
    return AblationCell(name, seed, steps, len(dataset), "ok", report=report)


def ablate_selection(
    ctx: AblationContext,
    strategies: Sequence[str],
    seeds: Optional[Sequence[int]] = None,
) -> list[AblationCell]:
    """
    One fine-tuned model and report per (strategy, seed) on the shared filtered pool.

    Random draws are keyed by the strategy name, so reordering strategies leaves
    every cell unchanged.
    """
    cur = ctx.cfg.curation
    rule = cur.filter_rule()
    cells = []
    for seed in seeds or ctx.cfg.evaluation.seeds:
        for name in strategies:
            try:
                data = build_dataset(ctx.pool, rule, _strategy(name, seed), cur.advantage_eps, cur.renormalize_after_selection)
            except Exception as exc:  # noqa: BLE001
                logging.error(f"Selection for cell {name} failed: {exc}")
                cells.append(AblationCell(name, seed, 0, 0, "error", error=str(exc)))
                continue
            if not data.pairs:
                logging.warning(f"Rule {rule.value} retained no groups; cell {name} left empty")
                cells.append(AblationCell(name, seed, 0, 0, "empty"))
                continue
            cells.append(_run_cell(ctx, name, seed, data.pairs, rule))
    return cells


def ablate_reward_combos(
    ctx: AblationContext,
    rules: Sequence[str],
    seeds: Optional[Sequence[int]] = None,
) -> list[AblationCell]:
    """
    One cell per filter rule: r_total is recomputed with the default weights restricted
    to the rule's channels, then filter, advantages and selection run as usual.
    Reports always use the default composite.
    """
    cur = ctx.cfg.curation
    default = ctx.cfg.rewards.weights()
    cells = []
    for seed in seeds or ctx.cfg.evaluation.seeds:
        for text in rules:
            rule = FilterRule.parse(text)
            name = f"rule:{rule.value}"
            try:
                pool = ctx.pool.rescored(default.restricted_to(rule.value))
                data = build_dataset(pool, rule, _strategy(cur.strategy, seed), cur.advantage_eps, cur.renormalize_after_selection)
            except Exception as exc:  # noqa: BLE001
                logging.error(f"Selection for cell {name} failed: {exc}")
                cells.append(AblationCell(name, seed, 0, 0, "error", error=str(exc)))
                continue
            if not data.pairs:
                logging.warning(f"Rule {rule.value} retained no groups; cell left empty")
                cells.append(AblationCell(name, seed, 0, 0, "empty"))
                continue
            cells.append(_run_cell(ctx, name, seed, data.pairs, rule))
    return cells


def vanilla_sft_baseline(
    ctx: AblationContext,
    seeds: Optional[Sequence[int]] = None,
    steps: Optional[int] = None,
) -> list[AblationCell]:
    """
    CRAFT and vanilla SFT (advantages fixed to 1) on the identical selected dataset,
    one pair of cells per seed.
    """
    cur = ctx.cfg.curation
    rule = cur.filter_rule()
    cells = []
    for seed in seeds or ctx.cfg.evaluation.seeds:
        data = build_dataset(ctx.pool, rule, _strategy(cur.strategy, seed), cur.advantage_eps, cur.renormalize_after_selection)
        n = steps if steps is not None else budget_steps(ctx.cfg, cur.strategy, len(data.pairs))
        cells.append(_run_cell(ctx, "craft", seed, data.pairs, rule, steps=n))
        cells.append(_run_cell(ctx, "vanilla-sft", seed, data.pairs, rule, vanilla=True, steps=n))
    return cells


def seed_averages(cells: Sequence[AblationCell]) -> dict[str, float]:
    """Composite mean per cell name, averaged over the seeds whose cell succeeded."""
    by_name: dict[str, list[float]] = {}
    for cell in cells:
        if cell.status == "ok" and cell.report is not None:
            by_name.setdefault(cell.name, []).append(cell.report.composite_mean)
    return {name: float(np.mean(v)) for name, v in by_name.items()}


def cell_rows(cells: Sequence[AblationCell]) -> list[dict[str, Any]]:
    """Flat records (one per cell and seed) for CSV output."""
    rows = []
    for cell in cells:
        row: dict[str, Any] = {
            "name": cell.name,
            "seed": cell.seed,
            "steps": cell.steps,
            "dataset_size": cell.dataset_size,
            "status": cell.status,
        }
        rep = cell.report
        row.update(
            {
                "composite_mean": rep.composite_mean if rep else "",
                "mean_h": rep.mean_raw[0] if rep else "",
                "mean_p": rep.mean_raw[1] if rep else "",
                "mean_a": rep.mean_raw[2] if rep else "",
                "count": rep.count if rep else "",
                "excluded": rep.excluded if rep else "",
                "error": cell.error or "",
            }
        )
        rows.append(row)
    return rows
