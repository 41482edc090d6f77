"""
manifest.py - Line-delimited JSON artifacts with a versioned, hash-stamped header

Every data artifact the pipeline writes (candidate pool, filtered pool, training
set) is a JSONL file whose first line is a header record and whose other lines
are one record each.

Features:

- ``ManifestHeader``: format version, stage name, config hash, scaler parameters,
  record counts and creation metadata.
- ``write_manifest()`` / ``read_manifest()``: file I/O; reads fail closed on a
  future format version, an unexpected stage, or a config hash that differs from
  the caller's.
- Converters between records and ``CandidatePool`` / ``TrainingPair`` objects.
- Custom exception: ``ManifestError``.

Header line::

    {"kind": "header", "format_version": 1, "stage": "candidates",
     "config_hash": "1f2e3d4c5b6a7988", "scaler": {...}, "weights": [0.4, 0.4, 0.2],
     "counts": {...}, "created_by": "craftalign 0.1.0", "meta": {...}}

Usage example:

    from craftalign.manifest import read_manifest, pool_from_manifest, write_pool

    write_pool("candidates.jsonl", pool, config_hash)
    header, records = read_manifest("candidates.jsonl", stage="candidates", config_hash=config_hash)
    pool = pool_from_manifest(header, records)
"""

import json
import logging
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from craftalign import __version__
from craftalign.curation import CandidatePool, GenerationGroup, TrainingPair, filter_flags
from craftalign.rewards import CompositeWeights, RewardError, RewardScaler
from craftalign.sampler import Sample

__all__ = [
    "ManifestError",
    "MANIFEST_VERSION",
    "STAGES",
    "ManifestHeader",
    "write_manifest",
    "read_manifest",
    "pool_records",
    "pool_from_manifest",
    "pair_records",
    "pairs_from_manifest",
    "write_pool",
    "write_pairs",
]

MANIFEST_VERSION = 1
STAGES = ("candidates", "filtered", "dataset")


class ManifestError(Exception):
    """Custom exception for artifact manifest errors."""
    pass


@dataclass(frozen=True)
class ManifestHeader:
    """
    First line of every artifact.

    Attributes:
        stage: Producing stage, one of ``STAGES``.
        config_hash: Hash of the configuration that produced the artifact.
        scaler: Reward scaler of the candidate pool.
        weights: Composite weights (alpha_h, alpha_p, alpha_a).
        counts: Record counts and other tallies.
        meta: Stage-specific details (rule, strategy, warnings, audit).
        format_version: Manifest format version.
        created_by: Producing package and version.
    """
    stage: str
    config_hash: str
    scaler: dict[str, Any]
    weights: tuple[float, float, float]
    counts: dict[str, int] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)
    format_version: int = MANIFEST_VERSION
    created_by: str = f"craftalign {__version__}"

    def to_record(self) -> dict[str, Any]:
        return {
            "kind": "header",
            "format_version": self.format_version,
            "stage": self.stage,
            "config_hash": self.config_hash,
            "scaler": self.scaler,
            "weights": list(self.weights),
            "counts": self.counts,
            "created_by": self.created_by,
            "meta": self.meta,
        }

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> "ManifestHeader":
        try:
            return cls(
                stage=str(record["stage"]),
                config_hash=str(record["config_hash"]),
                scaler=dict(record["scaler"]),
                weights=tuple(float(w) for w in record["weights"]),  # type: ignore[arg-type]
                counts={str(k): int(v) for k, v in record.get("counts", {}).items()},
                meta=dict(record.get("meta", {})),
                format_version=int(record["format_version"]),
                created_by=str(record.get("created_by", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"Malformed manifest header: {exc}") from exc

    @property
    def reward_scaler(self) -> RewardScaler:
        try:
            return RewardScaler.from_dict(self.scaler)
        except RewardError as exc:
            raise ManifestError(str(exc)) from exc

    @property
    def composite_weights(self) -> CompositeWeights:
        try:
            return CompositeWeights(*self.weights)
        except RewardError as exc:
            raise ManifestError(str(exc)) from exc


def _dumps(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_manifest(
    path: Union[str, Path],
    header: ManifestHeader,
    records: Sequence[dict[str, Any]],
) -> Path:
    """
    Write a header line plus one line per record; the file is renamed into place.
    """
    if header.stage not in STAGES:
        raise ManifestError(f"Unknown stage '{header.stage}'.")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        lines = [_dumps(header.to_record())] + [_dumps(r) for r in records]
    except ValueError as exc:
        logging.error(f"Non-finite value in {header.stage} records: {exc}")
        raise ManifestError(f"Cannot serialize {header.stage} records: {exc}") from exc
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    logging.info(f"Wrote {header.stage} manifest {path} ({len(records)} records)")
    return path


def read_manifest(
    path: Union[str, Path],
    stage: Optional[str] = None,
    config_hash: Optional[str] = None,
) -> tuple[ManifestHeader, list[dict[str, Any]]]:
    """
    Read and check an artifact.

    Args:
        path: JSONL file.
        stage: Expected stage, if any.
        config_hash: Expected config hash, if any.

    Returns:
        (header, records).

    Raises:
        ManifestError: On a missing or malformed file, a future format version,
            a stage mismatch or a config hash mismatch.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        logging.error(f"Cannot read manifest {path}: {exc}")
        raise ManifestError(f"Cannot read manifest {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"Manifest {path} is empty.")
    parsed = []
    for n, line in enumerate(lines, start=1):
        try:
            parsed.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{n}: invalid JSON: {exc}") from exc
    if parsed[0].get("kind") != "header":
        raise ManifestError(f"Manifest {path} does not start with a header record.")
    header = ManifestHeader.from_record(parsed[0])
    if header.format_version > MANIFEST_VERSION:
        logging.error(f"Manifest {path} has format version {header.format_version}; newest supported is {MANIFEST_VERSION}")
        raise ManifestError(
            f"Manifest {path} uses format version {header.format_version}, newer than {MANIFEST_VERSION}."
        )
    if stage is not None and header.stage != stage:
        logging.error(f"Manifest {path} is a '{header.stage}' artifact, expected '{stage}'")
        raise ManifestError(
            f"{path} holds the output of stage '{header.stage}', but this step needs '{stage}'."
        )
    if config_hash is not None and header.config_hash != config_hash:
        logging.error(f"Config hash mismatch for {path}: {header.config_hash} != {config_hash}")
        raise ManifestError(
            f"{path} was produced by config {header.config_hash}, not {config_hash}; "
            "refusing to mix artifacts."
        )
    return header, parsed[1:]


def _floats(values: Any) -> list[float]:
    return [float(v) for v in np.asarray(values, dtype=np.float64).ravel()]


def pool_records(pool: CandidatePool) -> list[dict[str, Any]]:
    """
    One record per sample (variants 0..N) of every group.

    Advantages are not known before filtering and are written as null.
    """
    records = []
    for g in pool.groups:
        retained = sorted(rule for rule, ok in filter_flags(g).items() if ok)
        for j, smp in enumerate(g.samples):
            records.append(
                {
                    "kind": "sample",
                    "prompt_id": g.prompt_id,
                    "variant": j,
                    "label": g.label,
                    "seed": smp.seed,
                    "x0": _floats(smp.x0),
                    "r_h": float(g.rewards[j, 0]),
                    "r_p": float(g.rewards[j, 1]),
                    "r_a": float(g.rewards[j, 2]),
                    "r_total": float(g.r_total[j]),
                    "advantage": None,
                    "retained_under": retained,
                    "embedding": _floats(g.embedding),
                }
            )
    return records


def pool_from_manifest(header: ManifestHeader, records: Sequence[dict[str, Any]]) -> CandidatePool:
    """
    Rebuild a candidate pool; records of one prompt must be contiguous with variants 0..N.
    """
    groups: list[GenerationGroup] = []
    current: list[dict[str, Any]] = []

    def close() -> None:
        if not current:
            return
        variants = [int(r["variant"]) for r in current]
        if variants != list(range(len(current))) or len(current) < 2:
            raise ManifestError(f"Prompt {current[0]['prompt_id']} has variants {variants}, expected 0..N.")
        pid = int(current[0]["prompt_id"])
        groups.append(
            GenerationGroup(
                prompt_id=pid,
                label=int(current[0]["label"]),
                embedding=np.asarray(current[0]["embedding"], dtype=np.float64),
                samples=tuple(
                    Sample(x0=np.asarray(r["x0"], dtype=np.float64), seed=int(r["seed"]), condition_ref=(pid, int(r["variant"])))
                    for r in current
                ),
                rewards=np.array([[r["r_h"], r["r_p"], r["r_a"]] for r in current], dtype=np.float64),
                r_total=np.array([r["r_total"] for r in current], dtype=np.float64),
            )
        )
        current.clear()

    try:
        for r in records:
            if r.get("kind") != "sample":
                raise ManifestError(f"Unexpected record kind '{r.get('kind')}' in a candidate pool.")
            if current and int(r["prompt_id"]) != int(current[0]["prompt_id"]):
                close()
            current.append(r)
        close()
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"Malformed sample record: {exc}") from exc
    audit = tuple(header.meta.get("audit", ()))
    return CandidatePool(
        groups=tuple(groups), scaler=header.reward_scaler, weights=header.composite_weights, audit=audit
    )


def pair_records(pairs: Sequence[TrainingPair]) -> list[dict[str, Any]]:
    return [
        {
            "kind": "pair",
            "prompt_id": p.prompt_id,
            "variant": p.variant,
            "label": p.label,
            "seed": p.seed,
            "x0": _floats(p.x0),
            "r_h": None if p.rewards is None else float(p.rewards[0]),
            "r_p": None if p.rewards is None else float(p.rewards[1]),
            "r_a": None if p.rewards is None else float(p.rewards[2]),
            "r_total": float(p.r_total),
            "advantage": None if p.advantage is None else float(p.advantage),
            "retained_under": sorted(p.retained_under),
            "embedding": _floats(p.embedding),
        }
        for p in pairs
    ]


def pairs_from_manifest(records: Sequence[dict[str, Any]]) -> list[TrainingPair]:
    try:
        pairs = []
        for r in records:
            if r.get("kind") != "pair":
                raise ManifestError(f"Unexpected record kind '{r.get('kind')}' in a pair manifest.")
            adv = r["advantage"]
            raw = (r.get("r_h"), r.get("r_p"), r.get("r_a"))
            pairs.append(
                TrainingPair(
                    prompt_id=int(r["prompt_id"]),
                    variant=int(r["variant"]),
                    label=int(r["label"]),
                    x0=np.asarray(r["x0"], dtype=np.float64),
                    seed=int(r["seed"]),
                    r_total=float(r["r_total"]),
                    advantage=None if adv is None else float(adv),
                    retained_under=frozenset(str(x) for x in r["retained_under"]),
                    embedding=np.asarray(r["embedding"], dtype=np.float64),
                    rewards=None if None in raw else (float(raw[0]), float(raw[1]), float(raw[2])),
                )
            )
        return pairs
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"Malformed pair record: {exc}") from exc


def write_pool(
    path: Union[str, Path],
    pool: CandidatePool,
    config_hash: str,
    meta: Optional[dict[str, Any]] = None,
) -> Path:
    records = pool_records(pool)
    header = ManifestHeader(
        stage="candidates",
        config_hash=config_hash,
        scaler=pool.scaler.to_dict(),
        weights=tuple(float(w) for w in pool.weights.as_array()),  # type: ignore[arg-type]
        counts={"groups": len(pool.groups), "samples": len(records), "excluded": len(pool.audit)},
        meta={"audit": list(pool.audit), **(meta or {})},
    )
    return write_manifest(path, header, records)


def write_pairs(
    path: Union[str, Path],
    stage: str,
    pairs: Sequence[TrainingPair],
    source: ManifestHeader,
    meta: Optional[dict[str, Any]] = None,
) -> Path:
    """Write a ``filtered`` or ``dataset`` artifact, carrying the scaler of ``source``."""
    header = ManifestHeader(
        stage=stage,
        config_hash=source.config_hash,
        scaler=source.scaler,
        weights=source.weights,
        counts={"pairs": len(pairs), "groups": len({p.prompt_id for p in pairs})},
        meta=meta or {},
    )
    return write_manifest(path, header, pair_records(pairs))
