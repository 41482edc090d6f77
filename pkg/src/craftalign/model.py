"""
model.py - Conditional epsilon-predictor with hand-derived reverse-mode gradients

This module provides the noise-prediction network used everywhere else, the weighted
noise-prediction loss and its exact gradient, and the ELBO-form Monte-Carlo estimate.

Features:

- ``ModelArchitecture`` / ``ModelParams``: fixed two-hidden-layer tanh MLP taking
  (x_t, sinusoidal time embedding, condition embedding) to an epsilon estimate.
  The output layer has no bias, so all-zero weights predict zero.
- Noise predictors are duck-typed through the ``NoisePredictor`` and
  ``DifferentiablePredictor`` protocols. Besides the MLP the module ships
  ``LinearPredictor`` (eps_hat = A x_t + b) and ``OraclePredictor`` (recovers the true
  noise from a known x0) for closed-form checks.
- ``loss_and_grad()``: mean over examples of weight * ||eps_hat - eps||^2 with (t, eps)
  drawn from each example's own RNG stream, and the exact gradient.
- ``elbo_neg_mse()``: Monte-Carlo average of w(t) * ||eps_hat - eps||^2.
- Non-finite activations raise ``NumericError``.

Usage example:

    from craftalign.model import Condition, ModelArchitecture, ModelParams, predict_eps

    arch = ModelArchitecture(data_dim=2, time_dim=8, cond_dim=3, hidden=(32, 32))
    params = ModelParams.initialize(arch, rng)
    c = Condition(id=0, variant=0, embedding=np.eye(3)[0], label=0)
    eps_hat = predict_eps(params, x_t, 25, c)

    # For testing, inject any object with a ``predict`` method:
    class ZeroPredictor:
        def predict(self, x_t, t, cond): return np.zeros_like(x_t)
"""

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from craftalign.schedule import NoiseSchedule, forward_diffuse

__all__ = [
    "DiffusionError",
    "NumericError",
    "Condition",
    "ModelArchitecture",
    "ModelParams",
    "NoisePredictor",
    "DifferentiablePredictor",
    "LinearPredictor",
    "OraclePredictor",
    "NoiseDraws",
    "WeightedExample",
    "time_embedding",
    "draw_noise",
    "draws_from_seeds",
    "predict_eps",
    "weighted_mse",
    "loss_and_grad",
    "elbo_terms",
    "elbo_neg_mse",
]


class DiffusionError(Exception):
    """Custom exception for diffusion model errors."""
    pass


class NumericError(DiffusionError):
    """Raised when a computation produces non-finite values or diverges."""
    pass


@dataclass(frozen=True, eq=False)
class Condition:
    """
    A prompt condition.

    Attributes:
        id: Prompt identifier i.
        variant: 0 for the original prompt, 1..N for refinements.
        embedding: Condition embedding vector (d_c,).
        label: Class id the prompt belongs to; selects the reward target.
    """
    id: int
    variant: int
    embedding: np.ndarray
    label: int = 0

    @property
    def ref(self) -> tuple[int, int]:
        return (self.id, self.variant)


@dataclass(frozen=True)
class ModelArchitecture:
    """
    Layer sizes of the epsilon-predictor.

    Attributes:
        data_dim: Dimension d of x.
        time_dim: Dimension of the sinusoidal time embedding (even).
        cond_dim: Dimension of the condition embedding.
        hidden: Sizes of the two tanh hidden layers.
    """
    data_dim: int
    time_dim: int
    cond_dim: int
    hidden: tuple[int, int]

    def __post_init__(self) -> None:
        if self.data_dim < 1 or self.cond_dim < 0 or min(self.hidden) < 1:
            raise DiffusionError(f"Invalid architecture sizes: {self}")
        if self.time_dim < 2 or self.time_dim % 2:
            raise DiffusionError("time_dim must be an even integer >= 2.")
        if len(self.hidden) != 2:
            raise DiffusionError("The epsilon-predictor has exactly two hidden layers.")

    @property
    def input_dim(self) -> int:
        return self.data_dim + self.time_dim + self.cond_dim

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        """Tensor shapes in storage order: W1, b1, W2, b2, W3."""
        h1, h2 = self.hidden
        return [(h1, self.input_dim), (h1,), (h2, h1), (h2,), (self.data_dim, h2)]

    @property
    def num_parameters(self) -> int:
        return sum(int(np.prod(shape)) for shape in self.shapes)


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """
    Sinusoidal embedding: [sin(t f_k), cos(t f_k)] with f_k = 10000^(-k / (dim/2)).

    Args:
        t: Timesteps, shape (n,).
        dim: Embedding dimension (even).

    Returns:
        numpy.ndarray: Shape (n, dim).
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class NoisePredictor(Protocol):
    """
    Protocol for epsilon-predictors, to allow dependency injection and testing.

    ``predict`` maps batches x_t (n, d), t (n,), cond (n, d_c) to eps_hat (n, d).
    """
    def predict(self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray) -> np.ndarray:
        ...


class DifferentiablePredictor(NoisePredictor, Protocol):
    """
    A noise predictor with a flat parameter vector and a vector-Jacobian product.

    ``backprop`` returns sum_n J_n^T d_out[n] as a flat vector, where J_n is the
    Jacobian of eps_hat for row n with respect to the flat parameters.
    """
    def flatten(self) -> np.ndarray:
        ...

    def with_flat(self, theta: np.ndarray) -> "DifferentiablePredictor":
        ...

    def backprop(
        self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray, d_out: np.ndarray
    ) -> np.ndarray:
        ...


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"Non-finite values in {name}.")


@dataclass(frozen=True, eq=False)
class ModelParams:
    """
    Weights of the epsilon-predictor MLP.

    Tensors are stored read-only, in the order W1, b1, W2, b2, W3:

        h1 = tanh(W1 [x_t; temb(t); c] + b1)
        h2 = tanh(W2 h1 + b2)
        eps_hat = W3 h2

    Args:
        architecture: Layer sizes.
        tensors: Tensors with shapes ``architecture.shapes``.
    """
    architecture: ModelArchitecture
    tensors: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        shapes = self.architecture.shapes
        if len(self.tensors) != len(shapes):
            raise DiffusionError(f"Expected {len(shapes)} tensors, got {len(self.tensors)}.")
        frozen = []
        for arr, shape in zip(self.tensors, shapes):
            a = np.array(arr, dtype=np.float64)
            if a.shape != shape:
                raise DiffusionError(f"Tensor shape {a.shape} does not match {shape}.")
            a.setflags(write=False)
            frozen.append(a)
        object.__setattr__(self, "tensors", tuple(frozen))

    @classmethod
    def zeros(cls, arch: ModelArchitecture) -> "ModelParams":
        return cls(arch, tuple(np.zeros(shape) for shape in arch.shapes))

    @classmethod
    def initialize(
        cls, arch: ModelArchitecture, rng: np.random.Generator, output_scale: float = 0.1
    ) -> "ModelParams":
        """
        Random init: weights ~ N(0, 1/fan_in), zero biases, output layer scaled down.
        """
        tensors = []
        for k, shape in enumerate(arch.shapes):
            if len(shape) == 1:
                tensors.append(np.zeros(shape))
                continue
            w = rng.standard_normal(shape) / np.sqrt(shape[1])
            if k == len(arch.shapes) - 1:
                w = w * output_scale
            tensors.append(w)
        return cls(arch, tuple(tensors))

    @property
    def num_parameters(self) -> int:
        return self.architecture.num_parameters

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.tensors])

    def with_flat(self, theta: np.ndarray) -> "ModelParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.num_parameters,):
            raise DiffusionError(
                f"Flat vector has shape {theta.shape}, expected ({self.num_parameters},)."
            )
        tensors = []
        offset = 0
        for shape in self.architecture.shapes:
            size = int(np.prod(shape))
            tensors.append(theta[offset:offset + size].reshape(shape))
            offset += size
        return ModelParams(self.architecture, tuple(tensors))

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for a in self.tensors)

    def _inputs(self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray) -> np.ndarray:
        arch = self.architecture
        x_t = np.asarray(x_t, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.float64)
        if x_t.ndim != 2 or x_t.shape[1] != arch.data_dim:
            raise DiffusionError(f"x_t must have shape (n, {arch.data_dim}), got {x_t.shape}.")
        if cond.shape != (x_t.shape[0], arch.cond_dim):
            raise DiffusionError(
                f"cond must have shape ({x_t.shape[0]}, {arch.cond_dim}), got {cond.shape}."
            )
        temb = time_embedding(t, arch.time_dim)
        if temb.shape[0] != x_t.shape[0]:
            raise DiffusionError("t must provide one timestep per row of x_t.")
        return np.concatenate([x_t, temb, cond], axis=1)

    def _forward(
        self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray
    ) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray, np.ndarray]]:
        w1, b1, w2, b2, w3 = self.tensors
        inp = self._inputs(x_t, t, cond)
        with np.errstate(over="ignore", invalid="ignore"):
            h1 = np.tanh(inp @ w1.T + b1)
            h2 = np.tanh(h1 @ w2.T + b2)
            out = h2 @ w3.T
        _check_finite("hidden activations", h1)
        _check_finite("hidden activations", h2)
        _check_finite("predicted noise", out)
        return out, (inp, h1, h2)

    def predict(self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray) -> np.ndarray:
        return self._forward(x_t, t, cond)[0]

    def backprop(
        self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray, d_out: np.ndarray
    ) -> np.ndarray:
        _, (inp, h1, h2) = self._forward(x_t, t, cond)
        _, _, w2, _, w3 = self.tensors
        d_w3 = d_out.T @ h2
        d_z2 = (d_out @ w3) * (1.0 - h2**2)
        d_w2 = d_z2.T @ h1
        d_b2 = d_z2.sum(axis=0)
        d_z1 = (d_z2 @ w2) * (1.0 - h1**2)
        d_w1 = d_z1.T @ inp
        d_b1 = d_z1.sum(axis=0)
        grad = np.concatenate([g.ravel() for g in (d_w1, d_b1, d_w2, d_b2, d_w3)])
        _check_finite("gradient", grad)
        return grad


@dataclass(frozen=True, eq=False)
class LinearPredictor:
    """
    eps_hat = A x_t + b, independent of t and the condition.

    Linear in its parameters, so M(theta) is exactly quadratic; used by the
    linear-Gaussian likelihood oracle and the closed-form sampler checks.
    """
    A: np.ndarray
    b: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        a = np.array(self.A, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DiffusionError("A must be a square matrix.")
        b = np.zeros(a.shape[0]) if self.b is None else np.array(self.b, dtype=np.float64)
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "b", b)

    @property
    def data_dim(self) -> int:
        return int(self.A.shape[0])

    def predict(self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray) -> np.ndarray:
        return np.asarray(x_t, dtype=np.float64) @ self.A.T + self.b

    def flatten(self) -> np.ndarray:
        assert self.b is not None
        return np.concatenate([self.A.ravel(), self.b])

    def with_flat(self, theta: np.ndarray) -> "LinearPredictor":
        d = self.data_dim
        theta = np.asarray(theta, dtype=np.float64)
        return LinearPredictor(theta[: d * d].reshape(d, d), theta[d * d:])

    def backprop(
        self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray, d_out: np.ndarray
    ) -> np.ndarray:
        return np.concatenate([(d_out.T @ np.asarray(x_t)).ravel(), d_out.sum(axis=0)])


@dataclass(frozen=True, eq=False)
class OraclePredictor:
    """
    Exact-fit predictor for a known clean point x0: eps = (x_t - sqrt(abar) x0) / sqrt(1 - abar).
    """
    x0: np.ndarray
    schedule: NoiseSchedule

    def predict(self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray) -> np.ndarray:
        abar = self.schedule.alpha_bar[self.schedule.check_t(t) - 1][:, None]
        return (np.asarray(x_t) - np.sqrt(abar) * self.x0) / np.sqrt(1.0 - abar)


@dataclass(frozen=True, eq=False)
class NoiseDraws:
    """
    A batch of (t, eps) draws: t has shape (n,), eps has shape (n, d).
    """
    t: np.ndarray
    eps: np.ndarray

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def repeat(self, times: int) -> "NoiseDraws":
        return NoiseDraws(np.tile(self.t, times), np.tile(self.eps, (times, 1)))


def draw_noise(rng: np.random.Generator, n: int, d: int, s: NoiseSchedule) -> NoiseDraws:
    """
    Draw n pairs t ~ Uniform{1..T}, eps ~ N(0, I_d). Timesteps are drawn before noise.
    """
    t = rng.integers(1, s.T + 1, size=n)
    eps = rng.standard_normal((n, d))
    return NoiseDraws(t, eps)


def draws_from_seeds(seeds: Sequence[int], d: int, s: NoiseSchedule) -> NoiseDraws:
    """
    One (t, eps) draw per seed, each from its own PCG64 stream.
    """
    ts = np.empty(len(seeds), dtype=np.int64)
    eps = np.empty((len(seeds), d))
    for k, seed in enumerate(seeds):
        one = draw_noise(np.random.Generator(np.random.PCG64(seed)), 1, d, s)
        ts[k] = one.t[0]
        eps[k] = one.eps[0]
    return NoiseDraws(ts, eps)


@dataclass(frozen=True, eq=False)
class WeightedExample:
    """
    One training example for the weighted noise-prediction loss.

    Attributes:
        x0: Clean datum (d,).
        condition: Condition the network is fed.
        weight: Per-example loss weight.
        seed: Seed of this example's (t, eps) stream.
    """
    x0: np.ndarray
    condition: Condition
    weight: float
    seed: int


def predict_eps(p: NoisePredictor, x_t: np.ndarray, t: int, c: Condition) -> np.ndarray:
    """
    Predict the noise in a single noised vector.

    Args:
        p: Model parameters (or any ``NoisePredictor``).
        x_t: Noised vector (d,).
        t: Timestep.
        c: Condition.

    Returns:
        numpy.ndarray: eps_hat, shape (d,).

    Raises:
        NumericError: On non-finite activations.
    """
    x = np.asarray(x_t, dtype=np.float64).reshape(1, -1)
    cond = np.asarray(c.embedding, dtype=np.float64).reshape(1, -1)
    return np.asarray(p.predict(x, np.array([t]), cond))[0]


def weighted_mse(
    predictor: NoisePredictor,
    x0: np.ndarray,
    cond: np.ndarray,
    weights: np.ndarray,
    draws: NoiseDraws,
    s: NoiseSchedule,
    include_w: bool = False,
    need_grad: bool = True,
) -> tuple[float, Optional[np.ndarray]]:
    """
    Mean over rows of weight * [w(t)] * ||eps_hat(x_t, t, c) - eps||^2 and its gradient.

    Args:
        predictor: Noise predictor; must be a ``DifferentiablePredictor`` if need_grad.
        x0: Clean data (n, d).
        cond: Condition embeddings (n, d_c).
        weights: Per-row weights (n,).
        draws: Per-row (t, eps).
        s: Noise schedule.
        include_w: Multiply each row by w(t).
        need_grad: Also return the flat gradient.

    Returns:
        (loss, flat gradient or None).

    Raises:
        NumericError: If the loss is not finite.
    """
    n = x0.shape[0]
    x_t = forward_diffuse(x0, draws.t, draws.eps, s)
    eps_hat = predictor.predict(x_t, draws.t, cond)
    diff = eps_hat - draws.eps
    coeff = np.asarray(weights, dtype=np.float64)
    if include_w:
        coeff = coeff * s.weights[draws.t - 1]
    loss = float(np.sum(coeff * np.sum(diff**2, axis=1)) / n)
    if not np.isfinite(loss):
        raise NumericError("Weighted noise-prediction loss is not finite.")
    if not need_grad:
        return loss, None
    d_out = (2.0 / n) * coeff[:, None] * diff
    grad = predictor.backprop(x_t, draws.t, cond, d_out)  # type: ignore[attr-defined]
    return loss, np.asarray(grad)


def loss_and_grad(
    p: ModelParams,
    minibatch: Sequence[WeightedExample],
    s: NoiseSchedule,
    draws: Optional[NoiseDraws] = None,
    include_w: bool = False,
) -> tuple[float, ModelParams]:
    """
    Weighted noise-prediction loss and its exact gradient.

    Each example draws t ~ Uniform{1..T} and eps ~ N(0, I) from its own stream
    (``example.seed``) unless ``draws`` is supplied.

    Args:
        p: Model parameters.
        minibatch: Non-empty sequence of examples.
        s: Noise schedule.
        draws: Optional explicit draws, one per example.
        include_w: Multiply each term by w(t).

    Returns:
        (loss, grad): grad has the same layout as p.

    Raises:
        DiffusionError: On an empty minibatch or non-finite weights.
        NumericError: On a non-finite loss or gradient.
    """
    if len(minibatch) == 0:
        raise DiffusionError("Minibatch must not be empty.")
    weights = np.array([ex.weight for ex in minibatch], dtype=np.float64)
    if not np.all(np.isfinite(weights)):
        raise DiffusionError("Per-sample weights must be finite.")
    x0 = np.stack([np.asarray(ex.x0, dtype=np.float64) for ex in minibatch])
    cond = np.stack([np.asarray(ex.condition.embedding, dtype=np.float64) for ex in minibatch])
    if draws is None:
        draws = draws_from_seeds([ex.seed for ex in minibatch], x0.shape[1], s)
    loss, grad = weighted_mse(p, x0, cond, weights, draws, s, include_w=include_w)
    assert grad is not None
    return loss, p.with_flat(grad)


def elbo_terms(
    predictor: NoisePredictor,
    x0: np.ndarray,
    c: Condition,
    s: NoiseSchedule,
    K: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    The K Monte-Carlo terms w(t_k) * ||eps_hat(x_t, t_k, c) - eps_k||^2 for one x0.
    """
    if K < 1:
        raise DiffusionError("K must be >= 1.")
    x0 = np.asarray(x0, dtype=np.float64)
    draws = draw_noise(rng, K, x0.shape[0], s)
    xs = np.broadcast_to(x0, (K, x0.shape[0]))
    x_t = forward_diffuse(xs, draws.t, draws.eps, s)
    cond = np.broadcast_to(np.asarray(c.embedding, dtype=np.float64), (K, len(c.embedding)))
    eps_hat = predictor.predict(x_t, draws.t, cond)
    terms = s.weights[draws.t - 1] * np.sum((eps_hat - draws.eps) ** 2, axis=1)
    _check_finite("ELBO terms", terms)
    return terms


def elbo_neg_mse(
    predictor: NoisePredictor,
    x0: np.ndarray,
    c: Condition,
    s: NoiseSchedule,
    K: int,
    rng: np.random.Generator,
) -> float:
    """
    Monte-Carlo estimate of M = E[w(t) * ||eps_hat(x_t, t, c) - eps||^2].

    The log-likelihood surrogate is -M + const.

    Args:
        predictor: Model parameters or any ``NoisePredictor``.
        x0: Clean vector (d,).
        c: Condition.
        s: Noise schedule.
        K: Number of (t, eps) draws (>= 1).
        rng: Random stream.

    Returns:
        float: The estimate.
    """
    return float(np.mean(elbo_terms(predictor, x0, c, s, K, rng)))
