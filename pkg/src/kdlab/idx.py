"""IDX binary image/label files, bit-exact.

Images: big-endian uint32 magic 0x00000803, then three big-endian uint32
extents (count, rows, cols), then unsigned bytes row-major. Labels: magic
0x00000801, one uint32 count, then one unsigned byte per label.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """The file does not follow the IDX layout."""


def _read_header(blob: bytes, expected_magic: int, n_dims: int, path) -> tuple[tuple[int, ...], int]:
    header = 4 * (1 + n_dims)
    if len(blob) < header:
        raise IdxFormatError(f"{path}: truncated IDX header")
    magic = struct.unpack_from(">I", blob, 0)[0]
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack_from(f">{n_dims}I", blob, 4)
    return dims, header


def read_idx_images(path: str | Path) -> np.ndarray:
    """uint8 array [N, rows, cols]."""
    blob = Path(path).read_bytes()
    (n, rows, cols), off = _read_header(blob, IMAGE_MAGIC, 3, path)
    need = n * rows * cols
    if len(blob) - off != need:
        raise IdxFormatError(f"{path}: expected {need} pixel bytes, found {len(blob) - off}")
    return np.frombuffer(blob, dtype=np.uint8, offset=off).reshape(n, rows, cols).copy()


def read_idx_labels(path: str | Path) -> np.ndarray:
    """uint8 array [N]."""
    blob = Path(path).read_bytes()
    (n,), off = _read_header(blob, LABEL_MAGIC, 1, path)
    if len(blob) - off != n:
        raise IdxFormatError(f"{path}: expected {n} label bytes, found {len(blob) - off}")
    return np.frombuffer(blob, dtype=np.uint8, offset=off).copy()


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise IdxFormatError(f"images must be [N, rows, cols], got shape {images.shape}")
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise IdxFormatError(f"labels must be 1-D, got shape {labels.shape}")
    Path(path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())
