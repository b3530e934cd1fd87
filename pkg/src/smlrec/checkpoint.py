"""Binary checkpoint container ("SMLC").

Layout, all little-endian::

    b"SMLC" | u32 version
    repeated until EOF:
        u32 name_len | name (utf-8) | u64 rows | u64 cols | rows*cols float32, row-major

Vectors are stored as a single row.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SMLC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _as_2d(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise CheckpointError(f"cannot store a {arr.ndim}-d tensor")
    return arr


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(tensors):
        arr = _as_2d(tensors[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not an SMLC checkpoint")
    if len(blob) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            rows, cols = struct.unpack_from("<QQ", blob, pos)
            pos += 16
            size = rows * cols * 4
            if pos + size > len(blob):
                raise CheckpointError(f"tensor {name!r} truncated")
            data = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=pos)
            out[name] = data.reshape(rows, cols).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def digest(tensors: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(dumps(tensors)).hexdigest()


def quantize(arr: np.ndarray) -> np.ndarray:
    """Round to float32 and back, i.e. to exactly what a checkpoint stores."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)
