"""Full-precision probability rasters.

Layout: 16-byte header (``b"PMAP"``, u32 height, u32 width, u32 reserved = 0)
followed by ``height * width`` little-endian float32 values, row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PMAP"


def write_pmap(path, prob: np.ndarray) -> None:
    prob = np.asarray(prob)
    if prob.ndim != 2:
        raise ValueError(f"probability raster must be 2-d, got shape {prob.shape}")
    h, w = prob.shape
    Path(path).write_bytes(MAGIC + struct.pack("<III", h, w, 0) + np.ascontiguousarray(prob, dtype="<f4").tobytes())


def read_pmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a probability raster")
    h, w, _ = struct.unpack_from("<III", raw, 4)
    if len(raw) != 16 + 4 * h * w:
        raise ValueError(f"{path}: expected {16 + 4 * h * w} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)
