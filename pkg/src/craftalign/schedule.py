"""
schedule.py - Noise schedules and the closed-form forward process

Features:

- ``NoiseSchedule``: immutable beta/alpha/alpha-bar/sigma arrays, indexed by
  timestep t = 1..T (stored 0-based).
- ``build_schedule()``: linear beta schedule with validated bounds.
- ``forward_diffuse()``: x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps, for one
  vector or a batch.
- ``weight_w()``: the timestep weight (1 / (2 sigma_t^2)) * ((1 - abar_t) / abar_t)
  used by the ELBO-form surrogate, and ``ddpm_weight()``, the textbook per-step
  KL coefficient beta_t^2 / (2 sigma_t^2 alpha_t (1 - abar_t)).

The reverse-process variance is sigma_t^2 = beta_t.

Usage example:

    from craftalign.schedule import build_schedule, forward_diffuse, weight_w

    s = build_schedule(50, 1e-4, 0.02)
    x_t = forward_diffuse(x0, 25, eps, s)
    w = weight_w(25, s)
"""

from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "ScheduleError",
    "NoiseSchedule",
    "build_schedule",
    "forward_diffuse",
    "weight_w",
    "ddpm_weight",
]

Timesteps = Union[int, np.ndarray]


class ScheduleError(ValueError):
    """Custom exception for noise schedule domain errors."""
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    Diffusion coefficients for timesteps 1..T.

    Attributes:
        T: Number of timesteps.
        beta: Noise rates, shape (T,).
        alpha: 1 - beta.
        alpha_bar: Running product of alpha.
        sigma: Reverse-process standard deviations (sigma_t^2 = beta_t).
    """
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_betas(cls, betas: "np.ndarray | list[float]") -> "NoiseSchedule":
        """
        Build a schedule from an explicit beta array.

        Raises:
            ScheduleError: If betas leave (0, 1) or decrease.
        """
        beta = np.asarray(betas, dtype=np.float64).copy()
        if beta.ndim != 1 or beta.size < 1:
            raise ScheduleError("betas must be a non-empty 1-D array.")
        if not np.all(np.isfinite(beta)) or np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ScheduleError("Every beta must lie strictly inside (0, 1).")
        if np.any(np.diff(beta) < 0.0):
            raise ScheduleError("betas must be nondecreasing.")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        sigma = np.sqrt(beta)
        for arr in (beta, alpha, alpha_bar, sigma):
            arr.setflags(write=False)
        return cls(T=int(beta.size), beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)

    def check_t(self, t: Timesteps) -> np.ndarray:
        """
        Validate timesteps and return them as an integer array.

        Raises:
            ScheduleError: If any t is outside 1..T.
        """
        arr = np.asarray(t)
        if arr.dtype.kind not in "iu":
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ScheduleError("Timesteps must be integers.")
            arr = arr.astype(np.int64)
        if arr.size and (arr.min() < 1 or arr.max() > self.T):
            raise ScheduleError(f"Timestep out of range 1..{self.T}: {arr.min()}..{arr.max()}")
        return arr

    @property
    def weights(self) -> np.ndarray:
        """w(t) for t = 1..T."""
        return (1.0 / (2.0 * self.sigma**2)) * ((1.0 - self.alpha_bar) / self.alpha_bar)

    @property
    def ddpm_weights(self) -> np.ndarray:
        """Textbook ELBO coefficient for t = 1..T."""
        return self.beta**2 / (2.0 * self.sigma**2 * self.alpha * (1.0 - self.alpha_bar))


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """
    Linear beta schedule from ``beta_start`` to ``beta_end`` over T steps.

    Args:
        T: Number of timesteps (>= 2).
        beta_start: beta_1, in (0, 1).
        beta_end: beta_T, with beta_start <= beta_end < 1.

    Returns:
        NoiseSchedule: The validated schedule.

    Raises:
        ScheduleError: On violated bounds.

    Example:
        >>> build_schedule(2, 0.5, 0.5).alpha_bar
        array([0.5 , 0.25])
    """
    if int(T) != T or T < 2:
        raise ScheduleError(f"T must be an integer >= 2, got {T}.")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"Require 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}."
        )
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(T)))


def forward_diffuse(x0: np.ndarray, t: Timesteps, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """
    Noise clean data to timestep t in closed form.

    Args:
        x0: Clean vector (d,) or batch (n, d).
        t: Timestep (int) or per-row timesteps (n,).
        eps: Standard normal noise with the shape of x0.
        s: Noise schedule.

    Returns:
        numpy.ndarray: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    Raises:
        ScheduleError: On a dimension mismatch or t out of range.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ScheduleError(f"Dimension mismatch: x0 {x0.shape} vs eps {eps.shape}.")
    idx = s.check_t(t) - 1
    abar = s.alpha_bar[idx]
    if np.ndim(abar) == 1:
        if x0.ndim != 2 or abar.shape[0] != x0.shape[0]:
            raise ScheduleError("Per-row timesteps need a batch x0 of matching length.")
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def weight_w(t: Timesteps, s: NoiseSchedule) -> "float | np.ndarray":
    """
    Timestep weight (1 / (2 sigma_t^2)) * ((1 - abar_t) / abar_t).

    Raises:
        ScheduleError: If t is out of range.

    Example:
        >>> s = build_schedule(2, 0.5, 0.5)
        >>> weight_w(1, s), weight_w(2, s)
        (1.0, 3.0)
    """
    idx = s.check_t(t) - 1
    w = s.weights[idx]
    return float(w) if np.ndim(w) == 0 else w


def ddpm_weight(t: Timesteps, s: NoiseSchedule) -> "float | np.ndarray":
    """Textbook per-step ELBO coefficient beta_t^2 / (2 sigma_t^2 alpha_t (1 - abar_t))."""
    idx = s.check_t(t) - 1
    w = s.ddpm_weights[idx]
    return float(w) if np.ndim(w) == 0 else w
