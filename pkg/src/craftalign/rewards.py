"""
rewards.py - Synthetic reward models, scale mapping and the composite reward

Three deterministic reward channels stand in for human-preference, pick-preference
and aesthetic judges. All of them score a sample against the ORIGINAL prompt of its
group, never against a refined variant.

Features:

- ``SyntheticRewardModel`` (implements ``RewardModelInterface``):
    - r_h = -||x0 - mu_c||^2 (alignment with the class target mu_c)
    - r_a = -lambda * ||x0||^4 / (1 + ||x0||^2) (compactness)
    - r_p = 0.7 * r_h + 0.3 * r_a + amp * hash_noise(x0, prompt id), with hash_noise
      in [-1, 1) taken from BLAKE2b of the sample bytes and prompt id
- ``fit_scaler()``: pool-level z-scoring with population std, clamped at 1e-8.
- ``composite()``: r_total = alpha_h z_h + alpha_p z_p + alpha_a z_a.
- ``CompositeWeights``: nonnegative weights summing to 1 (default 0.4, 0.4, 0.2),
  with ``restricted_to()`` for single- and partial-channel rules.
- Custom exception: ``RewardError``.

Usage example:

    from craftalign.rewards import CompositeWeights, SyntheticRewardModel, composite, fit_scaler

    rm = SyntheticRewardModel(targets=[[2.0, 0.0], [-1.0, 1.7], [-1.0, -1.7]])
    rv = rm.score_vector(x0, original_condition)
    scaler = fit_scaler(pool)
    r_total = composite(rv, scaler, CompositeWeights())

    # For testing, inject any object with ``score_vector``:
    class ConstantRewards:
        def score_vector(self, x0, c_original): return RewardVector(0.0, 0.0, 0.0)
"""

import hashlib
import logging
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any, Protocol, Union

import numpy as np

from craftalign.model import Condition

__all__ = [
    "RewardError",
    "REWARD_IDS",
    "RewardVector",
    "RewardScaler",
    "CompositeWeights",
    "RewardModelInterface",
    "SyntheticRewardModel",
    "hash_noise",
    "score",
    "fit_scaler",
    "composite",
    "composite_array",
]

REWARD_IDS = ("h", "p", "a")
STD_FLOOR = 1e-8
PREFERENCE_MIX = (0.7, 0.3)


class RewardError(Exception):
    """Custom exception for reward scoring and scaling errors."""
    pass


@dataclass(frozen=True)
class RewardVector:
    """Raw (unscaled) rewards of one sample."""
    r_h: float
    r_p: float
    r_a: float

    def __post_init__(self) -> None:
        if not all(np.isfinite(v) for v in (self.r_h, self.r_p, self.r_a)):
            raise RewardError(f"Reward vector must be finite: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.r_h, self.r_p, self.r_a], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "RewardVector":
        return cls(float(values[0]), float(values[1]), float(values[2]))


@dataclass(frozen=True)
class RewardScaler:
    """
    Per-channel (mean, std) fitted over a candidate pool.

    Attributes:
        mean: Channel means (h, p, a).
        std: Channel population stds, each >= the floor.
        count: Number of reward vectors the scaler was fitted on.
    """
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    count: int

    def transform(self, rewards: Union[RewardVector, np.ndarray]) -> np.ndarray:
        """
        Z-score one vector or an (n, 3) array of raw rewards.
        """
        raw = rewards.as_array() if isinstance(rewards, RewardVector) else np.asarray(rewards, dtype=np.float64)
        return (raw - np.asarray(self.mean)) / np.asarray(self.std)

    def to_dict(self) -> dict[str, Any]:
        return {"mean": list(self.mean), "std": list(self.std), "count": self.count}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RewardScaler":
        try:
            mean = tuple(float(v) for v in data["mean"])
            std = tuple(float(v) for v in data["std"])
            count = int(data["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise RewardError(f"Invalid scaler record: {data}") from exc
        if len(mean) != 3 or len(std) != 3 or min(std) < STD_FLOOR:
            raise RewardError(f"Invalid scaler record: {data}")
        return cls(mean=mean, std=std, count=count)  # type: ignore[arg-type]


@dataclass(frozen=True)
class CompositeWeights:
    """
    Weights (alpha_h, alpha_p, alpha_a) of the composite reward.

    Raises:
        RewardError: If a weight is negative or they do not sum to 1.
    """
    alpha_h: float = 0.4
    alpha_p: float = 0.4
    alpha_a: float = 0.2

    def __post_init__(self) -> None:
        values = self.as_array()
        if not np.all(np.isfinite(values)) or np.any(values < 0.0):
            raise RewardError(f"Composite weights must be nonnegative: {values.tolist()}")
        if abs(float(values.sum()) - 1.0) > 1e-9:
            raise RewardError(f"Composite weights must sum to 1, got {float(values.sum())}.")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha_h, self.alpha_p, self.alpha_a], dtype=np.float64)

    def restricted_to(self, channels: str) -> "CompositeWeights":
        """
        Renormalize onto a subset of channels, e.g. ``"ha"`` -> (2/3, 0, 1/3) from the defaults.

        Raises:
            RewardError: If the subset is empty, unknown, or carries zero weight.
        """
        if not channels or any(ch not in REWARD_IDS for ch in channels):
            raise RewardError(f"Unknown reward channels '{channels}'.")
        mask = np.array([ch in channels for ch in REWARD_IDS], dtype=np.float64)
        kept = self.as_array() * mask
        total = float(kept.sum())
        if total <= 0.0:
            raise RewardError(f"Channels '{channels}' carry zero composite weight.")
        h, p, a = (kept / total).tolist()
        return CompositeWeights(h, p, a)


class RewardModelInterface(Protocol):
    """
    Protocol for reward models, to allow dependency injection and testing.

    ``score_vector`` must score against the original (variant 0) condition.
    """
    def score_vector(self, x0: np.ndarray, c_original: Condition) -> RewardVector:
        ...


def hash_noise(x0: np.ndarray, prompt_id: int) -> float:
    """
    Deterministic pseudo-noise in [-1, 1) from the f64 bytes of x0 and the prompt id.
    """
    payload = np.asarray(x0, dtype="<f8").tobytes() + struct.pack("<q", int(prompt_id))
    u = int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")
    return u / 2.0**63 - 1.0


class SyntheticRewardModel:
    """
    Closed-form stand-ins for the three reward judges.

    Args:
        targets: Class target means mu_c, shape (num_classes, d).
        aesthetic_lambda: lambda in r_a.
        noise_amp: Amplitude of the hash noise in r_p.
    """

    def __init__(
        self,
        targets: Union[Sequence[Sequence[float]], np.ndarray],
        aesthetic_lambda: float = 1.0,
        noise_amp: float = 0.3,
    ) -> None:
        self.targets = np.asarray(targets, dtype=np.float64)
        if self.targets.ndim != 2 or self.targets.shape[0] < 1:
            raise RewardError("targets must be a non-empty (num_classes, d) table.")
        if aesthetic_lambda < 0.0 or noise_amp < 0.0:
            raise RewardError("aesthetic_lambda and noise_amp must be nonnegative.")
        self.aesthetic_lambda = float(aesthetic_lambda)
        self.noise_amp = float(noise_amp)

    def _check(self, x0: np.ndarray, c_original: Condition) -> np.ndarray:
        if c_original.variant != 0:
            logging.error(
                f"Reward requested against refined condition {c_original.ref}; rewards use originals"
            )
            raise RewardError(
                f"Rewards are scored against the original prompt; got variant {c_original.variant} "
                f"for prompt {c_original.id}."
            )
        if not (0 <= c_original.label < self.targets.shape[0]):
            raise RewardError(f"No reward target for class {c_original.label}.")
        x = np.asarray(x0, dtype=np.float64)
        if x.shape != (self.targets.shape[1],):
            raise RewardError(f"Sample has shape {x.shape}, expected ({self.targets.shape[1]},).")
        return x

    def score_vector(self, x0: np.ndarray, c_original: Condition) -> RewardVector:
        x = self._check(x0, c_original)
        mu = self.targets[c_original.label]
        r_h = -float(np.sum((x - mu) ** 2))
        sq = float(np.sum(x**2))
        r_a = -self.aesthetic_lambda * sq**2 / (1.0 + sq)
        r_p = (
            PREFERENCE_MIX[0] * r_h
            + PREFERENCE_MIX[1] * r_a
            + self.noise_amp * hash_noise(x, c_original.id)
        )
        return RewardVector(r_h=r_h, r_p=r_p, r_a=r_a)

    def score(self, x0: np.ndarray, c_original: Condition, which: str) -> float:
        if which not in REWARD_IDS:
            raise RewardError(f"Unknown reward id '{which}'.")
        rv = self.score_vector(x0, c_original)
        return {"h": rv.r_h, "p": rv.r_p, "a": rv.r_a}[which]


def score(x0: Any, c_original: Condition, which: str, model: SyntheticRewardModel) -> float:
    """
    Score a sample (``Sample`` or raw vector) against its original condition.

    Raises:
        RewardError: If ``c_original`` is a refined variant or ``which`` is unknown.
    """
    vec = getattr(x0, "x0", x0)
    return model.score(np.asarray(vec), c_original, which)


def fit_scaler(pool: Union[Sequence[RewardVector], np.ndarray], floor: float = STD_FLOOR) -> RewardScaler:
    """
    Fit per-channel mean and population std over a pool of raw rewards.

    Args:
        pool: Reward vectors, or an (n, 3) array.
        floor: Lower clamp for each std.

    Returns:
        RewardScaler: The fitted scaler.

    Raises:
        RewardError: If the pool is empty.
    """
    if isinstance(pool, np.ndarray):
        raw = np.asarray(pool, dtype=np.float64).reshape(-1, 3)
    else:
        raw = np.array([rv.as_array() for rv in pool], dtype=np.float64).reshape(-1, 3)
    if raw.shape[0] == 0:
        logging.error("Cannot fit a reward scaler on an empty pool")
        raise RewardError("Cannot fit a reward scaler on an empty pool.")
    mean = raw.mean(axis=0)
    std = np.maximum(raw.std(axis=0), floor)
    return RewardScaler(
        mean=tuple(float(v) for v in mean),  # type: ignore[arg-type]
        std=tuple(float(v) for v in std),  # type: ignore[arg-type]
        count=int(raw.shape[0]),
    )


def composite(rv: RewardVector, sc: RewardScaler, w: CompositeWeights) -> float:
    """
    r_total = alpha_h z_h + alpha_p z_p + alpha_a z_a on scaled rewards.
    """
    return float(np.dot(w.as_array(), sc.transform(rv)))


def composite_array(raw: np.ndarray, sc: RewardScaler, w: CompositeWeights) -> np.ndarray:
    """Composite reward for each row of an (n, 3) raw reward array."""
    return sc.transform(np.asarray(raw, dtype=np.float64).reshape(-1, 3)) @ w.as_array()
