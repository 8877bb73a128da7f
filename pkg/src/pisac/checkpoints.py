"""Flat binary container for named float64 arrays.

Layout (all integers little-endian):

    magic   8 bytes  b"PISACKPT"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated count times:
        name_len u16
        name     name_len bytes, UTF-8
        ndim     u8
        dims     ndim * u32
        data     prod(dims) * f64, little-endian, row-major

Used for parameter checkpoints and replay-buffer snapshots.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PISACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            data = np.asarray(arr, dtype="<f8")
            if data.ndim and not data.flags.c_contiguous:
                data = np.ascontiguousarray(data)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(data.tobytes())


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, offset) if ndim else ()
        offset += 4 * ndim
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(dims)
        offset += 8 * n
        out[name] = arr.astype(np.float64)
    return out
