"""Binary checkpoint container.

Layout: an 8-byte magic+version tag, a u32 header length, a canonical JSON
header (config, schedule spec with a digest of the realized betas, vocabulary
hash, stage tag, seed, step counter, loss history, and a parameter manifest
of names/shapes/offsets), followed by the raw little-endian float32 parameter
blocks in manifest order.  Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import schedule_from_spec
from .errors import CheckpointError

MAGIC = b"DBCK\x00\x01\x00\x00"  # tag + format version 1

STAGES = ("pretrained", "finetuned", "segmentation")


def schedule_digest(schedule_spec):
    """Digest of the beta sequence a schedule spec realizes."""
    betas = schedule_from_spec(schedule_spec).betas
    return hashlib.sha256(betas.astype("<f8").tobytes()).hexdigest()


def checkpoint_digest(ckpt):
    """Content digest of a checkpoint (config + parameter bytes); identifies
    which model produced downstream artifacts such as augmentation caches."""
    h = hashlib.sha256()
    meta = {"kind": ckpt.kind, "stage": ckpt.stage, "config": ckpt.config}
    h.update(json.dumps(meta, sort_keys=True).encode("utf-8"))
    for name in sorted(ckpt.params):
        h.update(name.encode("utf-8"))
        h.update(ckpt.params[name].astype("<f4").tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    """In-memory model snapshot with provenance metadata."""

    kind: str  # "denoiser" | "segmentation"
    stage: str
    config: dict
    params: dict  # name -> float32 ndarray
    seed: int
    step: int
    schedule_spec: dict | None = None
    vocab_hash: str | None = None
    loss_history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage tag {self.stage!r}")
        self.params = {
            name: np.ascontiguousarray(np.asarray(value, dtype=np.float32))
            for name, value in self.params.items()
        }


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    blocks = []
    for name, arr in ckpt.params.items():
        raw = arr.astype("<f4").tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blocks.append(raw)
        offset += len(raw)
    header = {
        "kind": ckpt.kind,
        "stage": ckpt.stage,
        "config": ckpt.config,
        "seed": ckpt.seed,
        "step": ckpt.step,
        "schedule": ckpt.schedule_spec,
        "schedule_digest": schedule_digest(ckpt.schedule_spec) if ckpt.schedule_spec else None,
        "vocab_hash": ckpt.vocab_hash,
        "loss_history": ckpt.loss_history,
        "extra": ckpt.extra,
        "params": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(header_bytes)).tobytes())
        fh.write(header_bytes)
        for raw in blocks:
            fh.write(raw)
    return path


def load_checkpoint(path, expect_vocab_hash=None):
    """Read a checkpoint; verifies container integrity, the schedule digest,
    and (when given) the vocabulary hash."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    header_len = int(np.frombuffer(blob, dtype="<u4", count=1, offset=len(MAGIC))[0])
    body_start = len(MAGIC) + 4
    if body_start + header_len > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[body_start : body_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc

    data_start = body_start + header_len
    params = {}
    for entry in header["params"]:
        start = data_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated parameter block {entry['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(entry["shape"])
        params[entry["name"]] = arr.copy()

    if header.get("schedule") is not None:
        if schedule_digest(header["schedule"]) != header.get("schedule_digest"):
            raise CheckpointError(f"{path}: schedule digest mismatch")
    if expect_vocab_hash is not None and header.get("vocab_hash") != expect_vocab_hash:
        raise CheckpointError(
            f"{path}: vocabulary hash mismatch (checkpoint {header.get('vocab_hash')!r})"
        )
    return Checkpoint(
        kind=header["kind"],
        stage=header["stage"],
        config=header["config"],
        params=params,
        seed=header["seed"],
        step=header["step"],
        schedule_spec=header.get("schedule"),
        vocab_hash=header.get("vocab_hash"),
        loss_history=header.get("loss_history", []),
        extra=header.get("extra", {}),
    )
