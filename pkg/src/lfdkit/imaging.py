"""Small raster utilities: block-mean downsampling and portable graymap export."""

from __future__ import annotations

import numpy as np


def block_mean(values, factor):
    """Downsample a 2D array by averaging factor x factor blocks."""
    h, w = values.shape
    if h % factor or w % factor:
        raise ValueError(f"shape {values.shape} not divisible by factor {factor}")
    return values.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def save_pgm(values, path):
    """Write a float array as a binary PGM (max-normalized to one byte per cell)."""
    v = np.asarray(values, dtype=float)
    peak = v.max()
    scaled = np.zeros_like(v) if peak <= 0 else v / peak
    data = np.round(scaled * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_pgm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        w, h = (int(v) for v in line.split())
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w).astype(float) / maxval
