"""
curation.py - Prompt refinement, candidate generation, composite reward filtering and selection

Features:

- ``PromptSet`` / ``build_prompt_set()``: toy prompts with one-hot class embeddings.
  Held-out prompt sets use an id offset so their ids never meet the training ids.
- Refinement providers (``RefinementProvider`` protocol):
    - ``PerturbationProvider``: deterministic uniform-in-ball perturbation of the
      original embedding (offline default)
    - ``FileExchangeProvider``: writes request records for an external process and
      reads its responses back, one-to-one by (prompt_id, variant)
- ``refine_prompts()``: fills in N refined conditions per original and enforces the
  perturbation radius.
- ``generate_and_score()``: one sample per (prompt, variant), rewards always against
  the original prompt, pool-level scaler fitted over every valid sample, r_total filled.
  Groups with a diverged sample are excluded and recorded in the audit.
- ``FilterRule`` / ``apply_filter()``: a group survives when a single refined sample
  beats the original on every channel of the rule at once. Retention is group-level.
- ``SelectionStrategy`` / ``select()``: Top(k), Random(k, seed), Low(k), All over
  annotated pairs.
- Custom exceptions: ``CurationError``, ``ProviderError``, ``RefinementPending``.

Usage example:

    from craftalign.curation import (
        FilterRule, PerturbationProvider, SelectionStrategy, apply_filter,
        build_prompt_set, generate_and_score, refine_prompts, select,
    )

    ps = refine_prompts(build_prompt_set(200, 3, 4), PerturbationProvider(0.5, 42), radius=0.5)
    pool = generate_and_score(ps, sampler, reward_model, weights, master=42)
    retained = apply_filter(pool.groups, FilterRule.HPA)
    result = select(annotated_pairs, SelectionStrategy.parse("top:50"))
"""

import enum
import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Protocol, Union

import numpy as np

from craftalign.model import Condition
from craftalign.rewards import (
    CompositeWeights,
    RewardModelInterface,
    RewardScaler,
    composite_array,
    fit_scaler,
)
from craftalign.sampler import Sample, SampleSource
from craftalign.seeding import derive_rng, derive_seed

__all__ = [
    "CurationError",
    "ProviderError",
    "RefinementPending",
    "PromptSet",
    "build_prompt_set",
    "RefinementProvider",
    "PerturbationProvider",
    "FileExchangeProvider",
    "refine_prompts",
    "GenerationGroup",
    "CandidatePool",
    "generate_and_score",
    "FilterRule",
    "filter_flags",
    "apply_filter",
    "TrainingPair",
    "SelectionStrategy",
    "SelectionResult",
    "select",
]

RADIUS_TOLERANCE = 1e-12


class CurationError(Exception):
    """Custom exception for curation pipeline errors."""
    pass


class ProviderError(CurationError):
    """Raised by refinement providers; ``prompt_id`` names the offending prompt if known."""

    def __init__(self, message: str, prompt_id: Optional[int] = None) -> None:
        super().__init__(message)
        self.prompt_id = prompt_id


class RefinementPending(ProviderError):
    """Raised when refinement requests were written and responses are not yet available."""
    pass


def one_hot(label: int, num_classes: int) -> np.ndarray:
    emb = np.zeros(num_classes)
    emb[label] = 1.0
    return emb


@dataclass(frozen=True, eq=False)
class PromptSet:
    """
    Original prompts and (once refined) their variants.

    Attributes:
        originals: Variant-0 conditions, in id order.
        refinements_per_prompt: N.
        refined: prompt id -> N refined conditions (variants 1..N); empty until refined.
    """
    originals: tuple[Condition, ...]
    refinements_per_prompt: int
    refined: Mapping[int, tuple[Condition, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [c.id for c in self.originals]
        if len(set(ids)) != len(ids):
            raise CurationError("Prompt ids must be unique.")
        if any(c.variant != 0 for c in self.originals):
            raise CurationError("Originals must have variant 0.")
        if self.refinements_per_prompt < 1:
            raise CurationError("refinements_per_prompt must be >= 1.")

    @property
    def ids(self) -> list[int]:
        return [c.id for c in self.originals]

    @property
    def is_refined(self) -> bool:
        return len(self.refined) == len(self.originals)

    def original(self, prompt_id: int) -> Condition:
        for c in self.originals:
            if c.id == prompt_id:
                return c
        raise CurationError(f"Unknown prompt id {prompt_id}.")

    def group_conditions(self, prompt_id: int) -> tuple[Condition, ...]:
        """Conditions (i, 0), (i, 1), ..., (i, N)."""
        if prompt_id not in self.refined:
            raise CurationError(f"Prompt {prompt_id} has not been refined.")
        return (self.original(prompt_id),) + tuple(self.refined[prompt_id])


def build_prompt_set(n: int, num_classes: int, refinements: int, id_offset: int = 0) -> PromptSet:
    """
    Toy prompt set: prompt i has class (i mod num_classes) and a one-hot embedding.

    Args:
        n: Number of prompts.
        num_classes: Number of classes (embedding dimension).
        refinements: N refinements per prompt.
        id_offset: First prompt id (held-out sets start after the training ids).
    """
    if n < 1 or num_classes < 1:
        raise CurationError("Prompt sets need n >= 1 and num_classes >= 1.")
    originals = tuple(
        Condition(id=id_offset + k, variant=0, embedding=one_hot(k % num_classes, num_classes), label=k % num_classes)
        for k in range(n)
    )
    return PromptSet(originals=originals, refinements_per_prompt=refinements)


class RefinementProvider(Protocol):
    """
    Protocol for prompt refiners.

    ``refine`` returns an embedding for every (prompt id, variant) pair with
    variant 1..n_variants, deterministically.
    """
    def refine(
        self, originals: Sequence[Condition], n_variants: int
    ) -> Mapping[tuple[int, int], np.ndarray]:
        ...


class PerturbationProvider:
    """
    Perturbs each original embedding by a point drawn uniformly from the ball of ``radius``.

    Args:
        radius: Ball radius (>= 0); 0 reproduces the original embedding.
        master: Master seed; variant (i, j) uses stream ``("refine", (i, j))``.
    """

    def __init__(self, radius: float, master: int) -> None:
        if radius < 0:
            raise ProviderError(f"Perturbation radius must be nonnegative, got {radius}.")
        self.radius = float(radius)
        self.master = master

    def refine(
        self, originals: Sequence[Condition], n_variants: int
    ) -> dict[tuple[int, int], np.ndarray]:
        out: dict[tuple[int, int], np.ndarray] = {}
        for c in originals:
            base = np.asarray(c.embedding, dtype=np.float64)
            dim = base.shape[0]
            for j in range(1, n_variants + 1):
                rng = derive_rng(self.master, "refine", (c.id, j))
                direction = rng.standard_normal(dim)
                direction /= max(float(np.linalg.norm(direction)), 1e-300)
                r = self.radius * float(rng.random()) ** (1.0 / dim)
                out[(c.id, j)] = base + r * direction
        return out


class FileExchangeProvider:
    """
    Hands refinement to an external process through line-delimited JSON files.

    The first call writes ``requests.jsonl`` (one record per (prompt_id, variant))
    and raises ``RefinementPending``. Once the external process has written
    ``responses.jsonl`` with records ``{"prompt_id", "variant", "embedding"}``,
    the next call reads them back and checks the two files match one-to-one.

    Args:
        exchange_dir: Directory holding the request and response files.
    """

    REQUESTS = "requests.jsonl"
    RESPONSES = "responses.jsonl"

    def __init__(self, exchange_dir: Union[str, Path]) -> None:
        self.exchange_dir = Path(exchange_dir)

    @property
    def requests_path(self) -> Path:
        return self.exchange_dir / self.REQUESTS

    @property
    def responses_path(self) -> Path:
        return self.exchange_dir / self.RESPONSES

    def write_requests(self, originals: Sequence[Condition], n_variants: int) -> list[dict[str, Any]]:
        records = [
            {
                "prompt_id": c.id,
                "variant": j,
                "label": c.label,
                "embedding": [float(v) for v in c.embedding],
            }
            for c in originals
            for j in range(1, n_variants + 1)
        ]
        self.exchange_dir.mkdir(parents=True, exist_ok=True)
        with self.requests_path.open("w", encoding="utf-8") as f:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
        logging.info(f"Wrote {len(records)} refinement requests to {self.requests_path}")
        return records

    def read_responses(self) -> dict[tuple[int, int], np.ndarray]:
        out: dict[tuple[int, int], np.ndarray] = {}
        with self.responses_path.open("r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    key = (int(rec["prompt_id"]), int(rec["variant"]))
                    emb = np.asarray(rec["embedding"], dtype=np.float64)
                except (ValueError, KeyError, TypeError) as exc:
                    raise ProviderError(f"Malformed response on line {lineno}: {exc}") from exc
                if key in out:
                    raise ProviderError(f"Duplicate response for {key}.", prompt_id=key[0])
                out[key] = emb
        return out

    def refine(
        self, originals: Sequence[Condition], n_variants: int
    ) -> dict[tuple[int, int], np.ndarray]:
        if not self.responses_path.exists():
            self.write_requests(originals, n_variants)
            raise RefinementPending(
                f"Refinement requests written to {self.requests_path}; "
                f"waiting for {self.responses_path}."
            )
        responses = self.read_responses()
        expected = {(c.id, j) for c in originals for j in range(1, n_variants + 1)}
        missing = sorted(expected - responses.keys())
        extra = sorted(responses.keys() - expected)
        if missing:
            raise ProviderError(f"No refinement returned for {missing[0]}.", prompt_id=missing[0][0])
        if extra:
            raise ProviderError(f"Unrequested refinement returned for {extra[0]}.", prompt_id=extra[0][0])
        return responses


def refine_prompts(ps: PromptSet, provider: RefinementProvider, radius: float) -> PromptSet:
    """
    Populate the N refined variants of every original prompt.

    Args:
        ps: Prompt set (originals only).
        provider: Refinement provider.
        radius: Maximum allowed ||refined - original||.

    Returns:
        PromptSet: A new set with ``refined`` filled; originals untouched.

    Raises:
        RefinementPending: If the provider is waiting on an external process.
        CurationError: On provider failure or an out-of-radius refinement, naming the prompt id.
    """
    if radius < 0:
        raise CurationError(f"Refinement radius must be nonnegative, got {radius}.")
    n_var = ps.refinements_per_prompt
    try:
        embeddings = provider.refine(ps.originals, n_var)
    except RefinementPending:
        raise
    except ProviderError as exc:
        logging.error(f"Refinement provider failed for prompt {exc.prompt_id}: {exc}")
        raise CurationError(f"Refinement failed for prompt {exc.prompt_id}: {exc}") from exc
    refined: dict[int, tuple[Condition, ...]] = {}
    for c in ps.originals:
        variants = []
        for j in range(1, n_var + 1):
            emb = embeddings.get((c.id, j))
            if emb is None:
                logging.error(f"Refinement provider returned nothing for prompt {c.id} variant {j}")
                raise CurationError(f"Refinement missing for prompt {c.id} variant {j}.")
            emb = np.asarray(emb, dtype=np.float64)
            if emb.shape != c.embedding.shape or not np.all(np.isfinite(emb)):
                logging.error(f"Invalid refinement for prompt {c.id} variant {j}")
                raise CurationError(f"Invalid refined embedding for prompt {c.id} variant {j}.")
            if np.linalg.norm(emb - c.embedding) > radius + RADIUS_TOLERANCE:
                logging.error(f"Refinement for prompt {c.id} variant {j} exceeds radius {radius}")
                raise CurationError(
                    f"Refined embedding for prompt {c.id} variant {j} exceeds radius {radius}."
                )
            variants.append(Condition(id=c.id, variant=j, embedding=emb, label=c.label))
        refined[c.id] = tuple(variants)
    return PromptSet(originals=ps.originals, refinements_per_prompt=n_var, refined=refined)


@dataclass(frozen=True, eq=False)
class GenerationGroup:
    """
    One original prompt, its N+1 samples and their rewards.

    Attributes:
        prompt_id: i.
        label: Class of the original prompt.
        embedding: Embedding of the original condition c_i^(0).
        samples: Samples j = 0..N.
        rewards: Raw rewards (N+1, 3), columns (h, p, a), all against condition (i, 0).
        r_total: Composite rewards (N+1,).
    """
    prompt_id: int
    label: int
    embedding: np.ndarray
    samples: tuple[Sample, ...]
    rewards: np.ndarray
    r_total: np.ndarray

    @property
    def size(self) -> int:
        return len(self.samples) - 1


@dataclass(frozen=True, eq=False)
class CandidatePool:
    """
    Scored candidate groups plus the scaler fitted over them.

    Attributes:
        groups: Valid groups in prompt-id order.
        scaler: Scaler fitted on every sample of every valid group (j = 0 included).
        weights: Composite weights used for r_total.
        audit: One record per excluded group.
    """
    groups: tuple[GenerationGroup, ...]
    scaler: RewardScaler
    weights: CompositeWeights
    audit: tuple[dict[str, Any], ...] = ()

    def rescored(self, weights: CompositeWeights) -> "CandidatePool":
        """The same pool with r_total recomputed under other weights (same scaler)."""
        groups = tuple(
            replace(g, r_total=composite_array(g.rewards, self.scaler, weights)) for g in self.groups
        )
        return CandidatePool(groups=groups, scaler=self.scaler, weights=weights, audit=self.audit)


def generate_and_score(
    ps: PromptSet,
    source: SampleSource,
    reward_model: RewardModelInterface,
    weights: CompositeWeights,
    master: int,
) -> CandidatePool:
    """
    Generate one sample per (i, j) and score every sample against c_i^(0).

    Sample (i, j) uses seed ``derive_seed(master, "generate", (i, j))``.

    Raises:
        CurationError: If the prompts are not refined or no group is valid.
    """
    if not ps.is_refined:
        raise CurationError("Prompts must be refined before generation.")
    conds: list[Condition] = []
    seeds: list[int] = []
    for i in ps.ids:
        for c in ps.group_conditions(i):
            conds.append(c)
            seeds.append(derive_seed(master, "generate", (c.id, c.variant)))
    x0s, diverged = source.generate(conds, seeds)
    size = ps.refinements_per_prompt + 1
    staged: list[tuple[Condition, tuple[Sample, ...], np.ndarray]] = []
    audit: list[dict[str, Any]] = []
    for g, i in enumerate(ps.ids):
        rows = slice(g * size, (g + 1) * size)
        if np.any(diverged[rows]):
            bad = [int(v) for v in np.nonzero(diverged[rows])[0]]
            logging.warning(f"Excluding prompt {i}: sampler diverged for variants {bad}")
            audit.append({"prompt_id": i, "reason": "sampler diverged", "variants": bad})
            continue
        original = ps.original(i)
        samples = tuple(
            Sample(x0=x0s[k], seed=seeds[k], condition_ref=conds[k].ref)
            for k in range(rows.start, rows.stop)
        )
        raw = np.stack([reward_model.score_vector(s.x0, original).as_array() for s in samples])
        staged.append((original, samples, raw))
    if not staged:
        logging.error("Every candidate group diverged; nothing to curate")
        raise CurationError("No valid candidate groups.")
    scaler = fit_scaler(np.concatenate([raw for _, _, raw in staged]))
    groups = tuple(
        GenerationGroup(
            prompt_id=original.id,
            label=original.label,
            embedding=np.asarray(original.embedding, dtype=np.float64),
            samples=samples,
            rewards=raw,
            r_total=composite_array(raw, scaler, weights),
        )
        for original, samples, raw in staged
    )
    logging.info(
        f"Generated {len(groups)} groups of {size} samples ({len(audit)} excluded)"
    )
    return CandidatePool(groups=groups, scaler=scaler, weights=weights, audit=tuple(audit))


class FilterRule(enum.Enum):
    """Retention rules; the value lists the reward channels that must all improve."""
    H = "h"
    P = "p"
    A = "a"
    HA = "ha"
    PA = "pa"
    HPA = "hpa"

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple("hpa".index(ch) for ch in self.value)

    @classmethod
    def parse(cls, text: str) -> "FilterRule":
        try:
            return cls(text.lower())
        except ValueError as exc:
            raise CurationError(f"Unknown filter rule '{text}'.") from exc


def _passes(rewards: np.ndarray, rule: FilterRule) -> bool:
    idx = list(rule.channels)
    beats = rewards[1:, idx] > rewards[0, idx]
    return bool(np.any(np.all(beats, axis=1)))


def filter_flags(group: GenerationGroup) -> dict[str, bool]:
    """Whether the group is retained under each rule, keyed by rule value."""
    return {rule.value: _passes(group.rewards, rule) for rule in FilterRule}


def apply_filter(groups: Sequence[GenerationGroup], rule: FilterRule) -> list[GenerationGroup]:
    """
    Keep groups where some refined sample j >= 1 beats sample 0 on every channel
    of ``rule`` simultaneously. Uses raw rewards only.
    """
    return [g for g in groups if _passes(g.rewards, rule)]


@dataclass(frozen=True, eq=False)
class TrainingPair:
    """
    A refined (prompt, sample) pair ready for training.

    Attributes:
        prompt_id: i.
        variant: j (>= 1).
        label: Class of the original prompt.
        x0: Sample vector.
        seed: Generation seed.
        r_total: Composite reward.
        advantage: Group advantage, or None before annotation.
        retained_under: Rules under which the pair's group is retained.
        embedding: Original condition embedding (variant 0), used for training.
        rewards: Raw (r_h, r_p, r_a) against the original prompt, when known.
    """
    prompt_id: int
    variant: int
    label: int
    x0: np.ndarray
    seed: int
    r_total: float
    advantage: Optional[float]
    retained_under: frozenset[str]
    embedding: np.ndarray
    rewards: Optional[tuple[float, float, float]] = None

    @property
    def key(self) -> tuple[int, int]:
        return (self.prompt_id, self.variant)

    @property
    def condition(self) -> Condition:
        return Condition(id=self.prompt_id, variant=0, embedding=self.embedding, label=self.label)


@dataclass(frozen=True)
class SelectionStrategy:
    """
    Top(k) | Random(k, seed) | Low(k) | All.

    ``parse("top:50")``, ``parse("random:50")``, ``parse("low:50")``, ``parse("all")``.
    """
    kind: str
    k: Optional[int] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("top", "random", "low", "all"):
            raise CurationError(f"Unknown selection strategy '{self.kind}'.")
        if self.kind != "all" and (self.k is None or self.k < 1):
            raise CurationError(f"Strategy '{self.kind}' needs k >= 1.")

    @property
    def name(self) -> str:
        return "all" if self.kind == "all" else f"{self.kind}:{self.k}"

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "SelectionStrategy":
        text = text.strip().lower()
        if text == "all":
            return cls("all", None, seed)
        kind, _, k = text.partition(":")
        try:
            return cls(kind, int(k), seed)
        except ValueError as exc:
            raise CurationError(f"Invalid selection strategy '{text}'.") from exc


@dataclass(frozen=True, eq=False)
class SelectionResult:
    """Selected pairs in (prompt_id, variant) order, plus any warnings."""
    pairs: tuple[TrainingPair, ...]
    strategy: SelectionStrategy
    warnings: tuple[str, ...] = ()


def select(pool: Sequence[TrainingPair], strategy: SelectionStrategy) -> SelectionResult:
    """
    Choose the training set from filtered, advantage-annotated pairs.

    Ties in r_total are broken by (prompt_id, variant) ascending. A k larger than
    the pool takes the whole pool and records a warning.

    Raises:
        CurationError: If an original (variant 0) or an unannotated pair is present.
    """
    for pair in pool:
        if pair.variant < 1:
            raise CurationError(f"Original sample {pair.key} cannot enter the training set.")
        if pair.advantage is None:
            raise CurationError(f"Pair {pair.key} has no advantage annotation.")
    ordered = sorted(pool, key=lambda p: p.key)
    warnings: list[str] = []
    k = len(ordered) if strategy.kind == "all" else int(strategy.k or 0)
    if k > len(ordered):
        msg = f"Requested {strategy.name} but only {len(ordered)} pairs are available; taking all."
        logging.warning(msg)
        warnings.append(msg)
        k = len(ordered)
    if strategy.kind == "all":
        chosen = ordered
    elif strategy.kind == "top":
        chosen = sorted(ordered, key=lambda p: (-p.r_total, p.key))[:k]
    elif strategy.kind == "low":
        chosen = sorted(ordered, key=lambda p: (p.r_total, p.key))[:k]
    else:
        rng = np.random.Generator(np.random.PCG64(strategy.seed))
        idx = rng.choice(len(ordered), size=k, replace=False) if k else np.array([], dtype=int)
        chosen = [ordered[int(i)] for i in idx]
    chosen = sorted(chosen, key=lambda p: p.key)
    return SelectionResult(pairs=tuple(chosen), strategy=strategy, warnings=tuple(warnings))
