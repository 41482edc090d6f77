"""
config.py - Run configuration: TOML schema, validation, serialization and hashing

Features:

- pydantic models for every section: ``[diffusion]``, ``[base]``, ``[rewards]``,
  ``[curation]``, ``[training]``, ``[verification]``, ``[evaluation]`` and the
  top-level ``seed`` (default 42).
- Unknown keys are rejected; instances are frozen.
- ``parse_config()`` reads TOML (``tomllib`` on 3.11+, ``tomli`` otherwise) and turns
  validation failures into a ``ConfigError`` listing dotted field paths.
- ``serialize_config()`` writes TOML with ``tomli_w``; parsing the output gives back
  an equal config.
- ``config_hash()``: 16 hex characters of BLAKE2b over the canonical JSON dump, stamped
  into every artifact.
- ``apply_overrides()``: command-line overrides, re-validated before hashing.

Requires:

- pydantic>=2
- tomli (Python < 3.11), tomli-w

Usage example:

    from craftalign.config import config_hash, parse_config

    cfg = parse_config("craft.toml")
    print(cfg.seed, cfg.training.learning_rate, config_hash(cfg))
"""

import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Literal, Optional, Union

import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

try:
    import tomllib as toml_reader
except ImportError:  # pragma: no cover
    import tomli as toml_reader  # type: ignore[no-redef]

from craftalign.curation import CurationError, FilterRule, SelectionStrategy
from craftalign.model import ModelArchitecture
from craftalign.rewards import CompositeWeights
from craftalign.schedule import NoiseSchedule, build_schedule

__all__ = [
    "ConfigError",
    "DiffusionConfig",
    "BaseDataConfig",
    "RewardsConfig",
    "CurationConfig",
    "TrainConfig",
    "VerificationConfig",
    "EvaluationConfig",
    "RunConfig",
    "load_config",
    "parse_config",
    "serialize_config",
    "config_hash",
    "apply_overrides",
]

MAX_SEED = 2**64 - 1
SQRT3 = math.sqrt(3.0)


class ConfigError(Exception):
    """Custom exception for configuration errors."""
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DiffusionConfig(_Section):
    """Data space, noise schedule and epsilon-predictor sizes."""
    data_dim: int = Field(2, ge=1)
    T: int = Field(50, ge=2)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    time_dim: int = Field(8, ge=2)
    hidden: tuple[int, int] = (32, 32)
    sample_bound: float = Field(1e6, gt=0)

    @field_validator("time_dim")
    @classmethod
    def validate_time_dim(cls, v: int) -> int:
        if v % 2:
            raise ValueError("time_dim must be even.")
        return v

    @field_validator("hidden")
    @classmethod
    def validate_hidden(cls, v: tuple[int, int]) -> tuple[int, int]:
        if min(v) < 1:
            raise ValueError("hidden layer sizes must be positive.")
        return v

    @model_validator(mode="after")
    def validate_betas(self) -> "DiffusionConfig":
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError("require 0 < beta_start <= beta_end < 1.")
        return self

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end)

    def architecture(self, cond_dim: int) -> ModelArchitecture:
        return ModelArchitecture(self.data_dim, self.time_dim, cond_dim, self.hidden)


class TrainConfig(_Section):
    """
    Optimizer and loop settings.

    The defaults are desk-scale; ``full_scale_preset()`` gives the full-scale
    learning rate 5e-5 and effective batch 128.
    """
    learning_rate: float = Field(1e-3, gt=0)
    minibatch_size: int = Field(16, ge=1)
    grad_accumulation: int = Field(1, ge=1)
    total_steps: int = Field(500, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    checkpoint_every: int = Field(100, ge=1)
    log_every: int = Field(50, ge=1)
    seed: Optional[int] = Field(None, ge=0, le=MAX_SEED)

    @classmethod
    def full_scale_preset(cls) -> "TrainConfig":
        return cls(learning_rate=5e-5, minibatch_size=16, grad_accumulation=8)

    @property
    def effective_batch(self) -> int:
        return self.minibatch_size * self.grad_accumulation


def _default_base_training() -> TrainConfig:
    return TrainConfig(
        learning_rate=3e-3, minibatch_size=64, total_steps=1500, checkpoint_every=500, log_every=250
    )


class BaseDataConfig(_Section):
    """
    Per-class Gaussian data the base model is pretrained on.

    Means sit away from the reward targets and the spread is wide, so the base
    model leaves room for alignment.
    """
    means: tuple[tuple[float, ...], ...] = ((1.0, 1.0), (-0.2, 1.8), (-1.4, -0.6))
    std: float = Field(0.8, gt=0)
    samples_per_class: int = Field(300, ge=1)
    training: TrainConfig = Field(default_factory=_default_base_training)


class RewardsConfig(_Section):
    """Synthetic reward parameters and composite weights."""
    targets: tuple[tuple[float, ...], ...] = ((2.0, 0.0), (-1.0, SQRT3), (-1.0, -SQRT3))
    aesthetic_lambda: float = Field(1.0, ge=0)
    noise_amp: float = Field(0.3, ge=0)
    alpha_h: float = Field(0.4, ge=0)
    alpha_p: float = Field(0.4, ge=0)
    alpha_a: float = Field(0.2, ge=0)

    @model_validator(mode="after")
    def validate_weights(self) -> "RewardsConfig":
        total = self.alpha_h + self.alpha_p + self.alpha_a
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"alpha_h + alpha_p + alpha_a must equal 1, got {total}.")
        if not self.targets:
            raise ValueError("targets must list at least one class.")
        return self

    def weights(self) -> CompositeWeights:
        return CompositeWeights(self.alpha_h, self.alpha_p, self.alpha_a)

    @property
    def num_classes(self) -> int:
        return len(self.targets)


class CurationConfig(_Section):
    """Prompt counts, refinement provider, filter rule and selection strategy."""
    num_prompts: int = Field(200, ge=1)
    refinements: int = Field(4, ge=1)
    radius: float = Field(0.5, ge=0)
    provider: Literal["perturbation", "file"] = "perturbation"
    exchange_dir: str = "refine_exchange"
    rule: str = "hpa"
    strategy: str = "top:50"
    renormalize_after_selection: bool = False
    advantage_eps: float = Field(1e-8, gt=0)

    @field_validator("rule")
    @classmethod
    def validate_rule(cls, v: str) -> str:
        try:
            return FilterRule.parse(v).value
        except CurationError as exc:
            raise ValueError(str(exc)) from exc

    @field_validator("strategy")
    @classmethod
    def validate_strategy(cls, v: str) -> str:
        try:
            return SelectionStrategy.parse(v).name
        except CurationError as exc:
            raise ValueError(str(exc)) from exc

    def filter_rule(self) -> FilterRule:
        return FilterRule.parse(self.rule)


def _default_eta_grid() -> tuple[float, ...]:
    return tuple(10.0 ** -(1.0 + 0.5 * k) for k in range(7))


class VerificationConfig(_Section):
    """Sizes and thresholds of the numerical checks."""
    groups: int = Field(8, ge=1)
    group_size: int = Field(4, ge=1)
    K: int = Field(1000, ge=1)
    time_dim: int = Field(2, ge=2)
    hidden: tuple[int, int] = (4, 2)
    eta_grid: tuple[float, ...] = Field(default_factory=_default_eta_grid)
    audit_groups: int = Field(10000, ge=1)
    elbo_K: int = Field(10000, ge=2)
    grad_tolerance: float = Field(1e-8, gt=0)
    slope_band: tuple[float, float] = (1.8, 2.2)

    @field_validator("eta_grid")
    @classmethod
    def validate_eta_grid(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if len(v) < 2 or any(e <= 0 for e in v) or any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("eta_grid needs at least two positive, strictly decreasing values.")
        return v

    @field_validator("time_dim")
    @classmethod
    def validate_time_dim(cls, v: int) -> int:
        if v % 2:
            raise ValueError("time_dim must be even.")
        return v


class EvaluationConfig(_Section):
    """Held-out evaluation and ablation grid settings."""
    num_prompts: int = Field(200, ge=1)
    K_per_prompt: int = Field(4, ge=1)
    seeds: tuple[int, ...] = (42,)
    strategies: tuple[str, ...] = ("top:50", "random:50", "low:50", "all")
    rules: tuple[str, ...] = ("h", "p", "ha", "hpa")
    reference_size: int = Field(50, ge=1)
    cell_steps: dict[str, int] = Field(default_factory=dict)

    @field_validator("strategies")
    @classmethod
    def validate_strategies(cls, v: tuple[str, ...]) -> tuple[str, ...]:
        try:
            return tuple(SelectionStrategy.parse(s).name for s in v)
        except CurationError as exc:
            raise ValueError(str(exc)) from exc

    @field_validator("rules")
    @classmethod
    def validate_rules(cls, v: tuple[str, ...]) -> tuple[str, ...]:
        try:
            return tuple(FilterRule.parse(r).value for r in v)
        except CurationError as exc:
            raise ValueError(str(exc)) from exc

    @field_validator("seeds")
    @classmethod
    def validate_seeds(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if not v or any(s < 0 or s > MAX_SEED for s in v):
            raise ValueError("seeds must be a non-empty list of unsigned 64-bit integers.")
        return v


class RunConfig(_Section):
    """Complete run configuration."""
    seed: int = Field(42, ge=0, le=MAX_SEED)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    base: BaseDataConfig = Field(default_factory=BaseDataConfig)
    rewards: RewardsConfig = Field(default_factory=RewardsConfig)
    curation: CurationConfig = Field(default_factory=CurationConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)
    verification: VerificationConfig = Field(default_factory=VerificationConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    @model_validator(mode="after")
    def validate_dimensions(self) -> "RunConfig":
        d = self.diffusion.data_dim
        if any(len(mu) != d for mu in self.rewards.targets):
            raise ValueError(f"every rewards.targets entry must have data_dim={d} components.")
        if len(self.base.means) != self.rewards.num_classes:
            raise ValueError("base.means must list one mean per reward target class.")
        if any(len(mu) != d for mu in self.base.means):
            raise ValueError(f"every base.means entry must have data_dim={d} components.")
        return self

    def architecture(self) -> ModelArchitecture:
        return self.diffusion.architecture(self.rewards.num_classes)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def load_config(data: dict[str, Any]) -> RunConfig:
    """
    Validate a config mapping.

    Raises:
        ConfigError: With dotted field paths for every violation.
    """
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        msg = _format_errors(exc)
        logging.error(f"Invalid configuration: {msg}")
        raise ConfigError(f"Invalid configuration: {msg}") from exc


def parse_config(path: Union[str, Path, None]) -> RunConfig:
    """
    Read and validate a TOML config file. ``None`` gives the defaults.

    Raises:
        ConfigError: If the file is missing, not TOML, or fails validation.
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        logging.error(f"Cannot read config {path}: {exc}")
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    try:
        data = toml_reader.loads(text)
    except toml_reader.TOMLDecodeError as exc:
        logging.error(f"Config {path} is not valid TOML: {exc}")
        raise ConfigError(f"Config {path} is not valid TOML: {exc}") from exc
    return load_config(data)


def _plain(cfg: RunConfig) -> dict[str, Any]:
    return cfg.model_dump(mode="json", exclude_none=True)


def serialize_config(cfg: RunConfig) -> str:
    """TOML text that parses back to an equal config."""
    return tomli_w.dumps(_plain(cfg))


def config_hash(cfg: RunConfig) -> str:
    """First 8 bytes of BLAKE2b over the canonical JSON dump, as 16 hex characters."""
    canonical = json.dumps(_plain(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(canonical.encode("utf-8"), digest_size=8).hexdigest()


def apply_overrides(
    cfg: RunConfig,
    seed: Optional[int] = None,
    rule: Optional[str] = None,
    strategy: Optional[str] = None,
    steps: Optional[int] = None,
) -> RunConfig:
    """
    Return ``cfg`` with command-line overrides applied and re-validated.

    Raises:
        ConfigError: If an override is invalid.
    """
    data = _plain(cfg)
    if seed is not None:
        data["seed"] = seed
    if rule is not None:
        data["curation"]["rule"] = rule
    if strategy is not None:
        data["curation"]["strategy"] = strategy
    if steps is not None:
        data["training"]["total_steps"] = steps
    return load_config(data)
