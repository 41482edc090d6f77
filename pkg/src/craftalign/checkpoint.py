"""
checkpoint.py - Versioned binary checkpoints for model parameters and optimizer state

Features:

- ``Checkpoint``: parameters, training step, the config hash of the run that made
  it, and optional AdamW moments (``OptimizerState``).
- ``encode_checkpoint()`` / ``decode_checkpoint()``: byte-level codec.
- ``save_checkpoint()`` / ``load_checkpoint()``: file I/O; writes go to a temporary
  file that is renamed into place, so a crash never leaves a half-written checkpoint.
- Future format versions, bad magic bytes and truncated payloads raise ``CheckpointError``.

Layout (all integers and floats little-endian)::

    b"CRFT"                       magic
    u32   format version          (1)
    u32   data_dim, time_dim, cond_dim
    u32   n_hidden, then n_hidden x u32 layer sizes
    u64   step
    8     config hash bytes
    u64   P (parameter count)
    f64   x P parameters, in order W1, b1, W2, b2, W3 (row-major)
    u32   has_optimizer (0 or 1)
    [u64  optimizer step, f64 x P first moments, f64 x P second moments]

Usage example:

    from craftalign.checkpoint import Checkpoint, load_checkpoint, save_checkpoint

    save_checkpoint("final.crft", Checkpoint(params, step=300, config_hash="1f2e3d4c5b6a7988"))
    ckpt = load_checkpoint("final.crft")
"""

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from craftalign.model import DiffusionError, ModelArchitecture, ModelParams

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "NO_HASH",
    "CheckpointError",
    "OptimizerState",
    "Checkpoint",
    "encode_checkpoint",
    "decode_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"CRFT"
FORMAT_VERSION = 1
NO_HASH = "0" * 16


class CheckpointError(Exception):
    """Custom exception for checkpoint encoding and loading errors."""
    pass


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """
    AdamW state: step counter and flat first/second moment vectors.
    """
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, num_parameters: int) -> "OptimizerState":
        return cls(step=0, m=np.zeros(num_parameters), v=np.zeros(num_parameters))


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """
    Attributes:
        params: Model parameters.
        step: Optimizer steps taken to reach ``params``.
        config_hash: 16 hex characters identifying the producing configuration.
        optimizer: AdamW moments, if saved.
    """
    params: ModelParams
    step: int = 0
    config_hash: str = NO_HASH
    optimizer: Optional[OptimizerState] = None


def _hash_bytes(config_hash: str) -> bytes:
    try:
        raw = bytes.fromhex(config_hash)
    except ValueError as exc:
        raise CheckpointError(f"Config hash '{config_hash}' is not hexadecimal.") from exc
    if len(raw) != 8:
        raise CheckpointError(f"Config hash must be 8 bytes, got {len(raw)}.")
    return raw


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """
    Serialize a checkpoint to bytes.

    Raises:
        CheckpointError: On an invalid hash, negative step or mismatched optimizer state.
    """
    arch = ckpt.params.architecture
    if ckpt.step < 0:
        raise CheckpointError("Checkpoint step must be non-negative.")
    theta = ckpt.params.flatten()
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<III", arch.data_dim, arch.time_dim, arch.cond_dim),
        struct.pack("<I", len(arch.hidden)),
        struct.pack(f"<{len(arch.hidden)}I", *arch.hidden),
        struct.pack("<Q", ckpt.step),
        _hash_bytes(ckpt.config_hash),
        struct.pack("<Q", theta.size),
        theta.astype("<f8").tobytes(),
    ]
    opt = ckpt.optimizer
    if opt is None:
        parts.append(struct.pack("<I", 0))
    else:
        if opt.m.shape != theta.shape or opt.v.shape != theta.shape:
            raise CheckpointError("Optimizer moments do not match the parameter count.")
        parts.append(struct.pack("<IQ", 1, opt.step))
        parts.append(np.asarray(opt.m, dtype="<f8").tobytes())
        parts.append(np.asarray(opt.v, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("Checkpoint is truncated.")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    Parse checkpoint bytes.

    Raises:
        CheckpointError: On bad magic, a future version, truncation, trailing bytes
            or a parameter count that disagrees with the architecture.
    """
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic bytes).")
    (version,) = r.unpack("<I")
    if version > FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint format version {version} is newer than supported version {FORMAT_VERSION}."
        )
    if version < 1:
        raise CheckpointError(f"Invalid checkpoint format version {version}.")
    data_dim, time_dim, cond_dim = r.unpack("<III")
    (n_hidden,) = r.unpack("<I")
    hidden = r.unpack(f"<{n_hidden}I")
    (step,) = r.unpack("<Q")
    config_hash = r.take(8).hex()
    (count,) = r.unpack("<Q")
    try:
        arch = ModelArchitecture(data_dim, time_dim, cond_dim, tuple(hidden))  # type: ignore[arg-type]
    except DiffusionError as exc:
        raise CheckpointError(f"Invalid architecture descriptor: {exc}") from exc
    if count != arch.num_parameters:
        raise CheckpointError(
            f"Parameter count {count} does not match architecture ({arch.num_parameters})."
        )
    params = ModelParams.zeros(arch).with_flat(r.floats(count))
    (has_opt,) = r.unpack("<I")
    optimizer = None
    if has_opt == 1:
        (opt_step,) = r.unpack("<Q")
        optimizer = OptimizerState(step=opt_step, m=r.floats(count), v=r.floats(count))
    elif has_opt != 0:
        raise CheckpointError(f"Invalid optimizer flag {has_opt}.")
    if r.pos != len(data):
        raise CheckpointError("Trailing bytes after checkpoint payload.")
    return Checkpoint(params=params, step=step, config_hash=config_hash, optimizer=optimizer)


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    """
    Write a checkpoint file.

    Returns:
        Path: The written path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    logging.info(f"Wrote checkpoint {path} (step {ckpt.step})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint file.

    Raises:
        CheckpointError: If the file is missing or invalid.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        logging.error(f"Cannot read checkpoint {path}: {exc}")
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)
