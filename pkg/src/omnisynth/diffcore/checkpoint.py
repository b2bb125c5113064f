"""Versioned binary checkpoint for named parameter tensors.

Layout (all integers little-endian):

    bytes 0..3   magic b"OSNF"
    u32          format version (currently 1)
    repeated until EOF:
        u32      name length in bytes
        bytes    UTF-8 name
        u32      rank
        u32 * r  dims
        f32 * n  row-major values

Values are stored as 32-bit floats regardless of in-memory dtype, matching
the training precision; loading returns float32 arrays.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

__all__ = ["save_params", "load_params", "CheckpointError", "FORMAT_VERSION", "MAGIC"]

MAGIC = b"OSNF"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Malformed, truncated, or version-incompatible checkpoint file."""


def save_params(path, params: dict[str, "Tensor | np.ndarray"]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.asarray(arr, dtype="<f4")  # keeps 0-d shapes intact
            if not arr.flags.c_contiguous:
                arr = arr.copy(order="C")
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} bytes for {what}, got {len(data)}")
    return data


def load_params(path) -> dict[str, np.ndarray]:
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint: partial record header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            count = int(np.prod(dims)) if rank else 1
            raw = _read_exact(f, 4 * count, f"values of {name}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return out
