"""Flat binary checkpoint format.

Layout (all integers little-endian): magic ``RSKT``, u32 version, u32
tensor count, then per tensor: u32 name length, UTF-8 name, u32 rank,
rank u64 dims, float64 payload. Tensors are written sorted by name so
identical states serialize byte-identically.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .tensor import Tensor

MAGIC = b"RSKT"
VERSION = 1


class CheckpointError(IOError):
    """Raised on malformed or truncated checkpoint files."""


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    items = sorted(
        (name, t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64))
        for name, t in tensors.items()
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", raw, offset)
            offset += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(dims)
            offset += 8 * n
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return out
