"""Minimal binary PGM/PPM writers and a reader for tests and tooling."""

import re
from pathlib import Path

import numpy as np


def _as_uint8(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return img


def write_pgm(path, img) -> None:
    """Grayscale image; float input is read as [0, 1]."""
    img = _as_uint8(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def write_ppm(path, img) -> None:
    img = _as_uint8(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an [H, W, 3] array, got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None or int(m.group(4)) != 255:
        raise ValueError(f"{path}: unsupported netpbm header")
    w, h = int(m.group(2)), int(m.group(3))
    shape = (h, w) if m.group(1) == b"P5" else (h, w, 3)
    body = raw[m.end():]
    return np.frombuffer(body[: int(np.prod(shape))], dtype=np.uint8).reshape(shape)
