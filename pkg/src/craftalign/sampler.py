"""
sampler.py - Ancestral sampling for the conditional diffusion model

Features:

- ``sample()``: one reverse chain x_T -> x_0 for a condition, bit-reproducible from its seed.
- ``sample_batch()``: many chains at once. Each chain reads its noise from its own
  tape (derived from its own seed), so a sample's value never depends on which
  other samples share the batch.
- ``DiffusionSampler``: the default ``SampleSource`` used by curation and evaluation.
- ``linear_gaussian_marginal()``: exact mean and covariance of x_0 when the
  predictor is linear (eps_hat = A x_t + b); the closed form the sampler is checked
  against.

Reverse step, for t = T..1::

    x_{t-1} = (1/sqrt(alpha_t)) * (x_t - (beta_t / sqrt(1 - abar_t)) * eps_hat) + sigma_t * z

with z ~ N(0, I) for t > 1 and z = 0 at t = 1. A noise tape is a (T, d) standard
normal draw from ``PCG64(seed)``: row 0 is x_T and row m (m >= 1) is the z used
at t = T - m + 1.

Usage example:

    from craftalign.sampler import DiffusionSampler, sample

    smp = sample(params, condition, schedule, seed=1234)
    source = DiffusionSampler(params, schedule, data_dim=2)
    x0s, diverged = source.generate(conditions, seeds)
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from craftalign.model import Condition, DiffusionError, NoisePredictor, NumericError
from craftalign.schedule import NoiseSchedule

__all__ = [
    "DEFAULT_BOUND",
    "Sample",
    "SampleSource",
    "DiffusionSampler",
    "noise_tape",
    "sample_batch",
    "sample",
    "linear_gaussian_marginal",
]

DEFAULT_BOUND = 1.0e6


@dataclass(frozen=True, eq=False)
class Sample:
    """
    A generated datum.

    Attributes:
        x0: Generated vector (d,).
        seed: Seed of the noise tape that produced it.
        condition_ref: (prompt id, variant) of the generating condition.
    """
    x0: np.ndarray
    seed: int
    condition_ref: tuple[int, int]


def noise_tape(seed: int, T: int, d: int) -> np.ndarray:
    """
    The (T, d) standard normal tape for one reverse chain.
    """
    return np.random.Generator(np.random.PCG64(seed)).standard_normal((T, d))


def sample_batch(
    predictor: NoisePredictor,
    conds: np.ndarray,
    s: NoiseSchedule,
    seeds: Sequence[int],
    data_dim: int,
    bound: float = DEFAULT_BOUND,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Run one reverse chain per (condition row, seed).

    Chains whose state leaves ``[-bound, bound]`` (or turns non-finite) are flagged
    and frozen at zero for the remaining steps.

    Args:
        predictor: Noise predictor.
        conds: Condition embeddings (n, d_c).
        s: Noise schedule.
        seeds: One tape seed per row.
        data_dim: Dimension d.
        bound: Divergence bound on any |component|.

    Returns:
        (x0, diverged): x0 of shape (n, d) and a boolean mask of shape (n,).
    """
    conds = np.asarray(conds, dtype=np.float64)
    n = len(seeds)
    if conds.ndim != 2 or conds.shape[0] != n:
        raise DiffusionError(f"Expected {n} condition rows, got shape {conds.shape}.")
    if bound <= 0:
        raise DiffusionError("Divergence bound must be positive.")
    if n:
        tapes = np.stack([noise_tape(int(seed), s.T, data_dim) for seed in seeds])
    else:
        tapes = np.zeros((0, s.T, data_dim))
    x = tapes[:, 0, :].copy()
    diverged = np.zeros(n, dtype=bool)
    for t in range(s.T, 0, -1):
        i = t - 1
        ts = np.full(n, t, dtype=np.int64)
        eps_hat = np.asarray(predictor.predict(x, ts, conds))
        with np.errstate(over="ignore", invalid="ignore"):
            x = (x - (s.beta[i] / np.sqrt(1.0 - s.alpha_bar[i])) * eps_hat) / np.sqrt(s.alpha[i])
            if t > 1:
                x = x + s.sigma[i] * tapes[:, s.T - t + 1, :]
        bad = ~np.all(np.isfinite(x), axis=1) | np.any(np.abs(x) > bound, axis=1)
        diverged |= bad
        x[diverged] = 0.0
    return x, diverged


def sample(
    p: NoisePredictor,
    c: Condition,
    s: NoiseSchedule,
    seed: int,
    bound: float = DEFAULT_BOUND,
) -> Sample:
    """
    Draw x_0 ~ p_theta(. | c) with the noise tape of ``seed``.

    Raises:
        NumericError: If the chain diverges past ``bound``.
    """
    emb = np.asarray(c.embedding, dtype=np.float64).reshape(1, -1)
    d = _data_dim(p)
    x0, diverged = sample_batch(p, emb, s, [seed], d, bound)
    if diverged[0]:
        logging.error(f"Sampler diverged for condition {c.ref} with seed {seed}")
        raise NumericError(f"Sampler diverged for condition {c.ref} with seed {seed}.")
    return Sample(x0=x0[0], seed=seed, condition_ref=c.ref)


def _data_dim(p: NoisePredictor) -> int:
    arch = getattr(p, "architecture", None)
    if arch is not None:
        return int(arch.data_dim)
    dim = getattr(p, "data_dim", None)
    if dim is None:
        raise DiffusionError("Cannot infer the data dimension of this predictor.")
    return int(dim)


class SampleSource(Protocol):
    """
    Protocol for anything that turns (conditions, seeds) into clean samples.

    ``generate`` returns (x0 of shape (n, d), diverged mask of shape (n,)).
    """
    def generate(
        self, conditions: Sequence[Condition], seeds: Sequence[int]
    ) -> tuple[np.ndarray, np.ndarray]:
        ...


class DiffusionSampler:
    """
    ``SampleSource`` backed by a noise predictor and the ancestral sampler.

    Args:
        predictor: Model parameters or any ``NoisePredictor``.
        schedule: Noise schedule.
        data_dim: Dimension d; inferred from the predictor when omitted.
        bound: Divergence bound.
    """

    def __init__(
        self,
        predictor: NoisePredictor,
        schedule: NoiseSchedule,
        data_dim: Optional[int] = None,
        bound: float = DEFAULT_BOUND,
    ) -> None:
        self.predictor = predictor
        self.schedule = schedule
        self.data_dim = data_dim if data_dim is not None else _data_dim(predictor)
        self.bound = bound

    def generate(
        self, conditions: Sequence[Condition], seeds: Sequence[int]
    ) -> tuple[np.ndarray, np.ndarray]:
        if len(conditions) != len(seeds):
            raise DiffusionError("generate() needs one seed per condition.")
        if not conditions:
            return np.zeros((0, self.data_dim)), np.zeros(0, dtype=bool)
        conds = np.stack([np.asarray(c.embedding, dtype=np.float64) for c in conditions])
        return sample_batch(self.predictor, conds, self.schedule, seeds, self.data_dim, self.bound)


def linear_gaussian_marginal(
    A: np.ndarray,
    b: Optional[np.ndarray],
    s: NoiseSchedule,
    final_noise: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Exact law of x_0 from the reverse chain with eps_hat = A x_t + b and x_T ~ N(0, I).

    Each step is affine, x_{t-1} = M_t x_t + c_t + sigma_t z, with
    M_t = (I - k_t A) / sqrt(alpha_t), c_t = -k_t b / sqrt(alpha_t),
    k_t = beta_t / sqrt(1 - abar_t).

    Args:
        A: (d, d) matrix.
        b: Offset (d,) or None.
        s: Noise schedule.
        final_noise: Add sigma_1 z at t = 1 (the likelihood model) instead of
            the sampler's noiseless last step.

    Returns:
        (mean, cov) of x_0.
    """
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    b = np.zeros(d) if b is None else np.asarray(b, dtype=np.float64)
    mean = np.zeros(d)
    cov = np.eye(d)
    eye = np.eye(d)
    for t in range(s.T, 0, -1):
        i = t - 1
        k = s.beta[i] / np.sqrt(1.0 - s.alpha_bar[i])
        M = (eye - k * A) / np.sqrt(s.alpha[i])
        mean = M @ mean - (k / np.sqrt(s.alpha[i])) * b
        cov = M @ cov @ M.T
        if t > 1 or final_noise:
            cov = cov + s.beta[i] * eye
    return mean, cov
