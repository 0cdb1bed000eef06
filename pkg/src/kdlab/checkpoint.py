"""Binary parameter checkpoints.

Layout (documented here; all integers little-endian):

    uint32               array count P
    P x manifest entry   uint32 ndim, then ndim x uint32 extents
    data                 P float64 little-endian arrays, row-major,
                         concatenated in manifest order

Arrays are stored in the model's definition order (trainable parameters
first, then running buffers), so a checkpoint pairs with the architecture
that wrote it. Writing the same state twice produces identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save_arrays(path: str | Path, arrays: Sequence[np.ndarray]) -> None:
    path = Path(path)
    chunks = [struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
    for a in arrays:
        chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_arrays(path: str | Path) -> list[np.ndarray]:
    blob = Path(path).read_bytes()
    off = 0

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise CheckpointError(f"truncated checkpoint {path}")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (count,) = take("<I")
    shapes: list[tuple[int, ...]] = []
    for _ in range(count):
        (ndim,) = take("<I")
        shapes.append(tuple(take(f"<{ndim}I")) if ndim else ())
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        size = n * 8
        if off + size > len(blob):
            raise CheckpointError(f"truncated checkpoint {path}")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        arrays.append(arr.astype(np.float64))
        off += size
    if off != len(blob):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return arrays
