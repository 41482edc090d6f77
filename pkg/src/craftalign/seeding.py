"""
seeding.py - Deterministic seed derivation for every stochastic step

Every random draw in the package comes from a numpy ``Generator`` whose seed is
derived from ``(master seed, domain label, index tuple)`` with a SplitMix64-style
mixer. The derivation is pure integer arithmetic, so any language can reproduce
the streams referenced by a manifest.

Features:

- ``derive_seed()`` returns the 64-bit seed; ``derive_rng()`` wraps it in a
  ``numpy.random.Generator`` backed by PCG64.
- Labels come from a fixed registry; an unregistered label is a contract error.
- Index order matters and labels never alias each other, because every element is
  folded through the mixer in sequence.
- ``name_index()`` turns a free-form name (a strategy or rule name) into an index
  so seeds can be keyed by name rather than by position in a list.

Derivation (all arithmetic modulo 2**64)::

    mix(x)  = z ^ (z >> 31) where
              z = x + 0x9E3779B97F4A7C15
              z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
              z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    h = mix(master)
    h = mix(h ^ LABELS[label])
    h = mix(h ^ len(index))
    for k in index: h = mix(h ^ k)
    seed = h

Usage example:

    from craftalign.seeding import derive_rng

    rng = derive_rng(42, "generate", (prompt_id, variant))
    noise = rng.standard_normal(2)
"""

import hashlib
from collections.abc import Sequence

import numpy as np

__all__ = ["SeedError", "LABELS", "mix64", "derive_seed", "derive_rng", "name_index"]

MASK64 = (1 << 64) - 1

# Label codes are part of the artifact format; never renumber an existing label.
LABELS: dict[str, int] = {
    "prompts": 0x01,
    "refine": 0x02,
    "generate": 0x03,
    "base-data": 0x04,
    "init": 0x05,
    "pretrain": 0x06,
    "train": 0x07,
    "train-order": 0x08,
    "select": 0x09,
    "eval": 0x0A,
    "verify": 0x0B,
    "perturb": 0x0C,
    "ablate": 0x0D,
}


class SeedError(Exception):
    """Custom exception for seed derivation errors."""
    pass


def mix64(x: int) -> int:
    """
    SplitMix64 step: add the golden-ratio increment, then apply the finalizer.

    Args:
        x: Any integer; only the low 64 bits are used.

    Returns:
        int: Mixed 64-bit value.
    """
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, label: str, index: Sequence[int] = ()) -> int:
    """
    Derive a 64-bit seed for one stochastic stream.

    Args:
        master: Run-level master seed (0 <= master < 2**64).
        label: Domain label from ``LABELS``.
        index: Tuple of non-negative integers identifying the stream in its domain.

    Returns:
        int: The derived seed.

    Raises:
        SeedError: If the label is unregistered or a value is out of range.
    """
    if label not in LABELS:
        raise SeedError(f"Unregistered seed label '{label}'.")
    if not (0 <= master <= MASK64):
        raise SeedError(f"Master seed {master} is outside the unsigned 64-bit range.")
    h = mix64(master)
    h = mix64(h ^ LABELS[label])
    h = mix64(h ^ len(index))
    for k in index:
        k = int(k)
        if not (0 <= k <= MASK64):
            raise SeedError(f"Seed index element {k} is outside the unsigned 64-bit range.")
        h = mix64(h ^ k)
    return h


def derive_rng(master: int, label: str, index: Sequence[int] = ()) -> np.random.Generator:
    """
    Build the numpy random stream for ``(master, label, index)``.

    Returns:
        numpy.random.Generator: PCG64 generator seeded with ``derive_seed(...)``.
    """
    return np.random.Generator(np.random.PCG64(derive_seed(master, label, index)))


def name_index(name: str) -> int:
    """
    Map a name to a stable 64-bit index (first 8 bytes of BLAKE2b, little-endian).

    Example:
        >>> derive_seed(42, "ablate", (name_index("top:50"), 0))
    """
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")
