"""Single-file model checkpoints.

Byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"TSCK"
    4       1     format version (1)
    5       4     u32 length L of the spec JSON
    9       L     ModelSpec as compact UTF-8 JSON, sorted keys
    ..      8     u64 seed
    ..      4     u32 epochs trained
    ..      8     f64 best validation accuracy (NaN if never evaluated)
    ..      4     u32 blob count B
            B x   blob: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
                  prod(dims) x float32 little-endian values
    end-4   4     u32 CRC32 of every preceding byte

Blobs are written in the model's parameter order followed by the batchnorm
running mean and variance.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .cnn import ModelError, ModelSpec, ScratchCNN

MAGIC = b"TSCK"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    """Truncated data, bad magic or a checksum mismatch."""


class UnsupportedVersion(CheckpointError):
    pass


class SpecMismatch(CheckpointError):
    """Stored parameters disagree with the stored ModelSpec."""


def to_bytes(model: ScratchCNN) -> bytes:
    spec = json.dumps(model.spec.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", VERSION, len(spec)), spec,
             struct.pack("<QId", model.seed & (2**64 - 1), model.epochs_trained, model.best_val_acc)]
    arrays = model.state_arrays()
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack(f"<H{len(raw)}sB", len(raw), raw, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CorruptCheckpoint(f"truncated checkpoint: needed {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> ScratchCNN:
    if len(data) < 5 + 4:
        raise CorruptCheckpoint("truncated checkpoint: file too short")
    if data[:4] != MAGIC:
        raise CorruptCheckpoint("not a checkpoint: bad magic bytes")
    if data[4] != VERSION:
        raise UnsupportedVersion(f"unsupported checkpoint version {data[4]} (this build reads {VERSION})")
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored:
        raise CorruptCheckpoint("checksum mismatch: file is truncated or corrupted")
    r = _Reader(data, len(data) - 4)
    r.pos = 5
    (spec_len,) = r.unpack("<I")
    try:
        spec = ModelSpec.from_dict(json.loads(r.take(spec_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise SpecMismatch(f"invalid model spec block: {exc}") from None
    seed, epoch, best = r.unpack("<QId")
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != r.end:
        raise CorruptCheckpoint(f"{r.end - r.pos} unexpected trailing bytes")
    model = ScratchCNN(spec, seed=seed, dtype=np.float32)
    try:
        model.load_state_arrays(arrays)
    except ModelError as exc:
        raise SpecMismatch(str(exc)) from None
    model.epochs_trained = epoch
    model.best_val_acc = best
    return model


def save(model: ScratchCNN, path) -> Path:
    """Write atomically: a sibling temp file is renamed over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model))
    os.replace(tmp, path)
    return path


def load(path) -> ScratchCNN:
    return from_bytes(Path(path).read_bytes())
