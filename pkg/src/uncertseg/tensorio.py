"""Binary tensor container and PGM export.

Container layout (little-endian): magic ``TNSR``, version u8, ndim u8,
one u32 per dimension, then the float32 payload in row-major order. The
save/load round trip is byte-identical.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"
VERSION = 1


class TensorFormatError(ValueError):
    """Raised for malformed tensor container files."""


def save_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim == 0 or arr.ndim > 255:
        raise ValueError(f"unsupported rank {arr.ndim}")
    if any(d <= 0 or d > 0xFFFFFFFF for d in arr.shape):
        raise ValueError(f"unsupported shape {arr.shape}")
    header = MAGIC + bytes([VERSION, arr.ndim])
    dims = np.asarray(arr.shape, dtype="<u4").tobytes()
    payload = arr.astype("<f4", copy=False).tobytes()
    Path(path).write_bytes(header + dims + payload)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic bytes")
    version, ndim = raw[4], raw[5]
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if ndim == 0:
        raise TensorFormatError(f"{path}: zero-rank tensor")
    dims_end = 6 + 4 * ndim
    if len(raw) < dims_end:
        raise TensorFormatError(f"{path}: truncated dimension header")
    shape = tuple(int(d) for d in np.frombuffer(raw[6:dims_end], dtype="<u4"))
    count = int(np.prod(shape))
    expected = dims_end + 4 * count
    if len(raw) != expected:
        raise TensorFormatError(
            f"{path}: payload size {len(raw) - dims_end} bytes does not match "
            f"shape {shape} ({4 * count} bytes expected)"
        )
    data = np.frombuffer(raw[dims_end:], dtype="<f4").astype(np.float32)
    return data.reshape(shape)


def export_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a 2-D image with values in [0, 1] as binary PGM (P5, maxval 255).

    Quantization is round-half-up: byte = floor(255 * v + 0.5).
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D image, got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("PGM export needs values in [0, 1]")
    h, w = img.shape
    quantized = np.floor(img.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + quantized.tobytes())
