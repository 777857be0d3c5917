"""Portable binary checkpoints.

Layout: 8-byte magic ``GENADCKP`` | u32 LE version (=1) | u32 LE metadata
length | UTF-8 JSON metadata (model config, ordered parameter manifest,
normalization stats, step counter, RNG digest) | each array's raw
little-endian float64 bytes in manifest order | u32 LE CRC32 of everything
preceding. Round trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import NormalizationStats
from .errors import CheckpointError
from .model import ModelConfig, ReconstructionModel
from .autodiff import Tensor

MAGIC = b"GENADCKP"
VERSION = 1
MASK_KEY = "mask_series"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]  # trainable tensors, insertion-ordered
    mask_series: np.ndarray
    stats: NormalizationStats | None
    step: int
    rng_digest: str

    def to_model(self) -> ReconstructionModel:
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}
        return ReconstructionModel(self.model_config, params, self.mask_series.copy())


def checkpoint_from_model(
    model: ReconstructionModel,
    stats: NormalizationStats | None,
    step: int,
    rng_digest: str,
) -> Checkpoint:
    return Checkpoint(
        model_config=model.config,
        params={k: t.data.copy() for k, t in model.params.items()},
        mask_series=model.mask_series.copy(),
        stats=stats,
        step=step,
        rng_digest=rng_digest,
    )


def _stats_to_json(stats: NormalizationStats | None):
    if stats is None:
        return None
    return {
        "metric_names": list(stats.metric_names),
        "mins": [float(v) for v in stats.mins],
        "maxs": [float(v) for v in stats.maxs],
    }


def _stats_from_json(obj) -> NormalizationStats | None:
    if obj is None:
        return None
    return NormalizationStats(
        metric_names=list(obj["metric_names"]),
        mins=np.asarray(obj["mins"], dtype=np.float64),
        maxs=np.asarray(obj["maxs"], dtype=np.float64),
    )


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays = dict(ckpt.params)
    arrays[MASK_KEY] = ckpt.mask_series
    manifest = [[name, list(a.shape)] for name, a in arrays.items()]
    meta = {
        "model_config": dataclasses.asdict(ckpt.model_config),
        "manifest": manifest,
        "stats": _stats_to_json(ckpt.stats),
        "step": int(ckpt.step),
        "rng_digest": ckpt.rng_digest,
    }
    meta_bytes = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes]
    for name, a in arrays.items():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    if len(raw) < len(MAGIC) + 8 + 4:
        raise CheckpointError("corrupted checkpoint: truncated header")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (this build reads version {VERSION})")
    body, (crc,) = raw[:-4], struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("corrupted checkpoint: checksum mismatch")
    (meta_len,) = struct.unpack_from("<I", raw, len(MAGIC) + 4)
    offset = len(MAGIC) + 8
    meta = json.loads(raw[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    arrays: dict[str, np.ndarray] = {}
    for name, shape in meta["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(body):
            raise CheckpointError("corrupted checkpoint: parameter section truncated")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    mask_series = arrays.pop(MASK_KEY)
    return Checkpoint(
        model_config=ModelConfig(**meta["model_config"]),
        params=arrays,
        mask_series=mask_series,
        stats=_stats_from_json(meta["stats"]),
        step=int(meta["step"]),
        rng_digest=meta["rng_digest"],
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
