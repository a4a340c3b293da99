"""Named-tensor checkpoint container ("AEW1").

Layout, all little-endian: 4-byte magic "AEW1", then one record per
tensor: uint32 name length, utf-8 name bytes, uint32 rank, uint32 dims,
float64 payload in row-major order.  Records run to end of file.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AEW1"


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    parts = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an AEW1 checkpoint (magic {raw[:4]!r})")
    out: dict[str, np.ndarray] = {}
    pos = 4
    while pos < len(raw):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        out[name] = arr.reshape(dims).astype(np.float64)
    return out
