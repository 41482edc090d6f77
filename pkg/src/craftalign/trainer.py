"""
trainer.py - Group advantages, the advantage-weighted SFT loss, AdamW and the training loop

Features:

- ``group_advantage()``: (r - mean) / (std + eps) over the N refined rewards of a
  group, population std; the original sample (j = 0) is excluded.
- ``AdvantageTable``: advantages per (prompt_id, variant) for retained groups,
  with ``annotate()`` producing training pairs and ``zero_sum_residuals()``.
- ``renormalize_selected()``: optional re-normalization of advantages inside the
  selected subset of each group.
- ``weighted_sft_loss()``: per-sample weight advantage * 1(group retained under the
  rule), conditioning on the ORIGINAL prompt, w(t) omitted; ``vanilla=True`` sets
  every advantage to 1.
- ``adamw_step()``: decoupled weight decay then a bias-corrected Adam step.
- ``train()``: fixed-step loop with gradient accumulation in a fixed order,
  per-visit noise streams, periodic checkpoints and a training log.
- ``pretrain()``: fits the base model to per-class Gaussian data with the same loop.
- Custom exceptions: ``TrainerError`` and ``TrainingAborted`` (carries the last
  good checkpoint).

Usage example:

    from craftalign.trainer import AdvantageTable, train

    table = AdvantageTable.from_groups(retained_groups, eps=1e-8)
    pairs = table.annotate(retained_groups)
    result = train(cfg.training, selected_pairs, base_ckpt, schedule, master=42, rule=FilterRule.HPA)
    final = result.final
"""

import logging
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from craftalign.checkpoint import NO_HASH, Checkpoint, OptimizerState, save_checkpoint
from craftalign.config import BaseDataConfig, TrainConfig
from craftalign.curation import FilterRule, GenerationGroup, TrainingPair, filter_flags
from craftalign.model import (
    ModelArchitecture,
    ModelParams,
    NumericError,
    WeightedExample,
    loss_and_grad,
)
from craftalign.schedule import NoiseSchedule
from craftalign.seeding import derive_rng, derive_seed

__all__ = [
    "TrainerError",
    "TrainingAborted",
    "OptimizerState",
    "group_advantage",
    "AdvantageTable",
    "renormalize_selected",
    "weighted_sft_loss",
    "adamw_step",
    "TrainResult",
    "train",
    "base_dataset",
    "pretrain",
]


class TrainerError(Exception):
    """Custom exception for training errors."""
    pass


class TrainingAborted(TrainerError):
    """Raised when training stops on a numeric failure; ``last_good`` is the last finite checkpoint."""

    def __init__(self, message: str, last_good: Checkpoint) -> None:
        super().__init__(message)
        self.last_good = last_good


def group_advantage(r_totals: Union[Sequence[float], np.ndarray], eps: float = 1e-8) -> np.ndarray:
    """
    Group-normalized advantages (r - mean) / (std + eps), population std.

    Args:
        r_totals: Composite rewards of the N refined samples (j = 1..N).
        eps: Stabilizer (> 0).

    Returns:
        numpy.ndarray: Advantages, summing to zero.

    Example:
        >>> group_advantage([1.0, 2.0, 3.0])
        array([-1.22474486,  0.        ,  1.22474486])
    """
    r = np.asarray(r_totals, dtype=np.float64)
    if r.ndim != 1 or r.size < 1:
        raise TrainerError("A group needs at least one reward.")
    if eps <= 0:
        raise TrainerError("eps must be positive.")
    return (r - r.mean()) / (r.std() + eps)


@dataclass(frozen=True)
class AdvantageTable:
    """
    Advantages per (prompt_id, variant) over retained groups.

    Attributes:
        values: (prompt_id, variant) -> advantage, variants 1..N only.
        epsilon_stab: eps used in ``group_advantage``.
    """
    values: Mapping[tuple[int, int], float]
    epsilon_stab: float = 1e-8

    @classmethod
    def from_groups(cls, groups: Sequence[GenerationGroup], eps: float = 1e-8) -> "AdvantageTable":
        values: dict[tuple[int, int], float] = {}
        for g in groups:
            adv = group_advantage(g.r_total[1:], eps)
            for j, a in enumerate(adv, start=1):
                values[(g.prompt_id, j)] = float(a)
        return cls(values=values, epsilon_stab=eps)

    def __getitem__(self, key: tuple[int, int]) -> float:
        return self.values[key]

    def zero_sum_residuals(self) -> dict[int, float]:
        """|sum of advantages| per prompt id."""
        sums: dict[int, float] = {}
        for (i, _), a in sorted(self.values.items()):
            sums[i] = sums.get(i, 0.0) + a
        return {i: abs(s) for i, s in sums.items()}

    def annotate(self, groups: Sequence[GenerationGroup]) -> list[TrainingPair]:
        """
        Training pairs (variants 1..N) of the given groups, carrying their advantages.

        Raises:
            TrainerError: If a group has no advantages in this table.
        """
        pairs = []
        for g in groups:
            retained = frozenset(rule for rule, ok in filter_flags(g).items() if ok)
            for j in range(1, len(g.samples)):
                key = (g.prompt_id, j)
                if key not in self.values:
                    raise TrainerError(f"No advantage for {key}.")
                smp = g.samples[j]
                pairs.append(
                    TrainingPair(
                        prompt_id=g.prompt_id,
                        variant=j,
                        label=g.label,
                        x0=smp.x0,
                        seed=smp.seed,
                        r_total=float(g.r_total[j]),
                        advantage=self.values[key],
                        retained_under=retained,
                        embedding=g.embedding,
                        rewards=(float(g.rewards[j, 0]), float(g.rewards[j, 1]), float(g.rewards[j, 2])),
                    )
                )
        return pairs


def renormalize_selected(pairs: Sequence[TrainingPair], eps: float = 1e-8) -> list[TrainingPair]:
    """
    Recompute advantages among the selected members of each group.
    """
    by_prompt: dict[int, list[TrainingPair]] = {}
    for pair in pairs:
        by_prompt.setdefault(pair.prompt_id, []).append(pair)
    fresh: dict[tuple[int, int], float] = {}
    for members in by_prompt.values():
        adv = group_advantage([m.r_total for m in members], eps)
        for m, a in zip(members, adv):
            fresh[m.key] = float(a)
    return [replace(p, advantage=fresh[p.key]) for p in pairs]


def weighted_sft_loss(
    p: ModelParams,
    minibatch: Sequence[TrainingPair],
    rule: Optional[FilterRule],
    s: NoiseSchedule,
    seeds: Sequence[int],
    vanilla: bool = False,
) -> tuple[float, ModelParams]:
    """
    Advantage-weighted noise-prediction loss and its gradient.

    Each pair contributes advantage * 1(group retained under ``rule``) times
    ||eps_hat(x_t, t, c_i^(0)) - eps||^2, averaged over the minibatch, without w(t).

    Args:
        p: Model parameters.
        minibatch: Annotated pairs.
        rule: Filter rule of the indicator; None counts every pair as retained.
        s: Noise schedule.
        seeds: Per-pair seeds of the (t, eps) draws.
        vanilla: Use advantage 1 for every pair (plain SFT).

    Returns:
        (loss, grad).

    Raises:
        TrainerError: On a missing advantage or a seed count mismatch.
    """
    if len(seeds) != len(minibatch):
        raise TrainerError("weighted_sft_loss needs one seed per pair.")
    examples = []
    for pair, seed in zip(minibatch, seeds):
        if pair.advantage is None and not vanilla:
            logging.error(f"Pair {pair.key} reached the trainer without an advantage")
            raise TrainerError(f"Pair {pair.key} has no advantage annotation.")
        adv = 1.0 if vanilla else float(pair.advantage)  # type: ignore[arg-type]
        indicator = 1.0 if rule is None or rule.value in pair.retained_under else 0.0
        examples.append(WeightedExample(pair.x0, pair.condition, adv * indicator, seed))
    return loss_and_grad(p, examples, s)


def adamw_step(
    state: OptimizerState,
    p: ModelParams,
    grad: Union[ModelParams, np.ndarray],
    cfg: TrainConfig,
) -> tuple[OptimizerState, ModelParams]:
    """
    One AdamW update: decay theta by (1 - lr * wd), then the bias-corrected Adam step.

    Raises:
        NumericError: If the gradient is not finite.
        TrainerError: On a shape mismatch.
    """
    g = grad.flatten() if isinstance(grad, ModelParams) else np.asarray(grad, dtype=np.float64)
    theta = p.flatten()
    if g.shape != theta.shape or state.m.shape != theta.shape:
        raise TrainerError("Gradient, optimizer state and parameters must have the same size.")
    if not np.all(np.isfinite(g)):
        logging.error(f"Non-finite gradient at optimizer step {state.step + 1}")
        raise NumericError(f"Non-finite gradient at optimizer step {state.step + 1}.")
    step = state.step + 1
    theta = theta * (1.0 - cfg.learning_rate * cfg.weight_decay)
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g**2
    m_hat = m / (1.0 - cfg.beta1**step)
    v_hat = v / (1.0 - cfg.beta2**step)
    theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return OptimizerState(step=step, m=m, v=v), p.with_flat(theta)


@dataclass(frozen=True, eq=False)
class TrainResult:
    """
    Attributes:
        final: Checkpoint after the last step.
        checkpoints: Periodic checkpoints, in step order.
        log: One record per step: step, loss, grad_norm, lr.
    """
    final: Checkpoint
    checkpoints: list[Checkpoint] = field(default_factory=list)
    log: list[dict[str, Any]] = field(default_factory=list)


def _visits(n: int, master: int, order_label: str) -> Iterator[tuple[int, int]]:
    epoch = 0
    while True:
        for k in derive_rng(master, order_label, (epoch,)).permutation(n):
            yield int(k), epoch
        epoch += 1


def train(
    cfg: TrainConfig,
    dataset: Sequence[TrainingPair],
    init: Union[ModelParams, Checkpoint],
    s: NoiseSchedule,
    master: int,
    rule: Optional[FilterRule] = None,
    vanilla: bool = False,
    config_hash: Optional[str] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    labels: tuple[str, str] = ("train", "train-order"),
) -> TrainResult:
    """
    Run ``cfg.total_steps`` AdamW steps of the weighted SFT loss.

    Each epoch visits the dataset in the order of a ``train-order`` permutation.
    A pair's (t, eps) draws on visit v come from seed
    ``derive_seed(master, "train", (prompt_id, variant, v))``. Each step averages
    ``grad_accumulation`` minibatches of ``minibatch_size`` pairs in stream order.

    Args:
        cfg: Training settings (``cfg.seed`` overrides ``master`` if set).
        dataset: Training pairs.
        init: Starting parameters or checkpoint.
        s: Noise schedule.
        master: Master seed.
        rule: Rule of the retention indicator (None: all retained).
        vanilla: Train with all advantages set to 1.
        config_hash: Stamped into checkpoints.
        checkpoint_dir: If given, periodic checkpoints are written there as
            ``step_XXXXXX.crft``.
        labels: Seed labels for the per-visit draws and the epoch order.

    Returns:
        TrainResult: Final checkpoint, periodic checkpoints and the step log.

    Raises:
        TrainerError: On an empty dataset with steps to run.
        TrainingAborted: On a numeric failure, carrying the last good checkpoint.
    """
    params = init.params if isinstance(init, Checkpoint) else init
    stamp = config_hash or (init.config_hash if isinstance(init, Checkpoint) else NO_HASH)
    master = cfg.seed if cfg.seed is not None else master
    draw_label, order_label = labels
    opt = OptimizerState.zeros(params.num_parameters)
    last_good = Checkpoint(params=params, step=0, config_hash=stamp, optimizer=opt)
    result = TrainResult(final=last_good)
    if cfg.total_steps == 0:
        return result
    if len(dataset) == 0:
        logging.error("Training requested on an empty dataset")
        raise TrainerError("Training dataset is empty.")
    visits = _visits(len(dataset), master, order_label)
    for step in range(1, cfg.total_steps + 1):
        try:
            loss_sum = 0.0
            grad_sum = np.zeros(params.num_parameters)
            for _ in range(cfg.grad_accumulation):
                batch = [next(visits) for _ in range(cfg.minibatch_size)]
                pairs = [dataset[k] for k, _ in batch]
                seeds = [
                    derive_seed(master, draw_label, (dataset[k].prompt_id, dataset[k].variant, epoch))
                    for k, epoch in batch
                ]
                loss, grad = weighted_sft_loss(params, pairs, rule, s, seeds, vanilla=vanilla)
                loss_sum += loss
                grad_sum += grad.flatten()
            grad_mean = grad_sum / cfg.grad_accumulation
            opt, params = adamw_step(opt, params, grad_mean, cfg)
            if not params.is_finite():
                raise NumericError(f"Parameters became non-finite at step {step}.")
        except NumericError as exc:
            logging.error(f"Training aborted at step {step}: {exc}; last good checkpoint is step {last_good.step}")
            raise TrainingAborted(
                f"Training aborted at step {step}: {exc}", last_good=last_good
            ) from exc
        record = {
            "step": step,
            "loss": loss_sum / cfg.grad_accumulation,
            "grad_norm": float(np.linalg.norm(grad_mean)),
            "lr": cfg.learning_rate,
        }
        result.log.append(record)
        if step % cfg.log_every == 0 or step == cfg.total_steps:
            logging.info(
                f"step {step}/{cfg.total_steps}: loss={record['loss']:.6f} grad_norm={record['grad_norm']:.6f}"
            )
        if step % cfg.checkpoint_every == 0:
            last_good = Checkpoint(params=params, step=step, config_hash=stamp, optimizer=opt)
            result.checkpoints.append(last_good)
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / f"step_{step:06d}.crft", last_good)
    final = Checkpoint(params=params, step=cfg.total_steps, config_hash=stamp, optimizer=opt)
    return TrainResult(final=final, checkpoints=result.checkpoints, log=result.log)


def base_dataset(base: BaseDataConfig, master: int) -> list[TrainingPair]:
    """
    Per-class Gaussian pretraining data: ``samples_per_class`` draws around each mean.
    """
    rng = derive_rng(master, "base-data")
    means = np.asarray(base.means, dtype=np.float64)
    num_classes, d = means.shape
    pairs = []
    every = frozenset(rule.value for rule in FilterRule)
    for label in range(num_classes):
        embedding = np.zeros(num_classes)
        embedding[label] = 1.0
        for _ in range(base.samples_per_class):
            x0 = means[label] + base.std * rng.standard_normal(d)
            pairs.append(
                TrainingPair(
                    prompt_id=len(pairs),
                    variant=0,
                    label=label,
                    x0=x0,
                    seed=0,
                    r_total=0.0,
                    advantage=None,
                    retained_under=every,
                    embedding=embedding,
                )
            )
    return pairs


def pretrain(
    base: BaseDataConfig,
    arch: ModelArchitecture,
    s: NoiseSchedule,
    master: int,
    config_hash: Optional[str] = None,
) -> TrainResult:
    """
    Fit a freshly initialized model to the base data with the plain diffusion loss.

    Raises:
        TrainerError: If the base data dimensions do not match the architecture.
    """
    data = base_dataset(base, master)
    if data and (data[0].x0.shape[0] != arch.data_dim or data[0].embedding.shape[0] != arch.cond_dim):
        raise TrainerError("Base data dimensions do not match the model architecture.")
    init = ModelParams.initialize(arch, derive_rng(master, "init"))
    logging.info(f"Pretraining base model on {len(data)} samples for {base.training.total_steps} steps")
    return train(
        base.training,
        data,
        init,
        s,
        master,
        rule=None,
        vanilla=True,
        config_hash=config_hash,
        labels=("pretrain", "pretrain"),
    )
