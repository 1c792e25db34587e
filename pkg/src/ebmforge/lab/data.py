"""Datasets: synthetic 2-D mixtures and rings, procedural 8x8 digits, IDX files."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..energies import downsample

__all__ = ["Dataset", "mixture2d", "rings2d", "synthetic_digits", "load_idx", "IdxFormatError"]

IMAGE_MAGIC = 0x00000803


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    points: np.ndarray                     # (n, d), float64
    modes: Optional[np.ndarray] = None     # known mode centres, synthetic data only
    mode_std: Optional[float] = None
    image_shape: Optional[tuple] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.points)):
            raise ValueError("dataset contains non-finite values")
        if self.image_shape is not None and (self.points.min() < 0 or self.points.max() > 1):
            raise ValueError("raster data must lie in [0, 1]")

    def __len__(self):
        return len(self.points)

    @property
    def dim(self):
        return self.points.shape[1]

    def batch(self, n, rng):
        return self.points[rng.integers(len(self.points), size=n)]


def ring_modes(k, radius):
    ang = 2 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def mixture2d(k=8, radius=4.0, std=0.25, n=10000, rng=None) -> Dataset:
    rng = np.random.default_rng(0) if rng is None else rng
    modes = ring_modes(k, radius)
    pts = modes[rng.integers(k, size=n)] + std * rng.standard_normal((n, 2))
    return Dataset(pts, modes=modes, mode_std=std)


def rings2d(radii=(2.0, 4.0), std=0.1, n=10000, rng=None) -> Dataset:
    rng = np.random.default_rng(0) if rng is None else rng
    r = np.asarray(radii)[rng.integers(len(radii), size=n)] + std * rng.standard_normal(n)
    ang = rng.uniform(0, 2 * np.pi, n)
    return Dataset(np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1))


# 3x5 bitmap font, rows top to bottom
_FONT = {
    0: ["111", "101", "101", "101", "111"], 1: ["010", "110", "010", "010", "111"],
    2: ["111", "001", "111", "100", "111"], 3: ["111", "001", "111", "001", "111"],
    4: ["101", "101", "111", "001", "001"], 5: ["111", "100", "111", "001", "111"],
    6: ["111", "100", "111", "101", "111"], 7: ["111", "001", "010", "010", "010"],
    8: ["111", "101", "111", "101", "111"], 9: ["111", "101", "111", "001", "111"],
}


def digit_template(d: int) -> np.ndarray:
    """8x8 glyph: the 3x5 font scaled to 6x... and centred (strokes 2 px wide)."""
    glyph = np.array([[int(c) for c in row] for row in _FONT[d]], dtype=np.float64)
    big = np.kron(glyph, np.ones((1, 2)))          # 5 x 6
    img = np.zeros((8, 8))
    img[1:6, 1:7] = big
    return img


def synthetic_digits(n=5000, noise=0.05, rng=None) -> Dataset:
    """Procedural 8x8 digits: a glyph shifted by up to one pixel down, plus noise."""
    rng = np.random.default_rng(0) if rng is None else rng
    templates = np.stack([digit_template(d) for d in range(10)])
    labels = rng.integers(10, size=n)
    shifts = rng.integers(0, 3, size=n)
    imgs = np.zeros((n, 8, 8))
    for i, (lab, s) in enumerate(zip(labels, shifts)):
        imgs[i] = np.roll(templates[lab], s, axis=0)
    imgs = np.clip(imgs + noise * rng.standard_normal(imgs.shape), 0.0, 1.0)
    return Dataset(imgs.reshape(n, 64), modes=templates.reshape(10, 64), image_shape=(8, 8))


def load_idx(path, downsample_to_14=False, limit=None) -> np.ndarray:
    """Parse an IDX image file (optionally gzipped) into floats in [0, 1].

    Layout: big-endian u32 magic 0x00000803, u32 count, u32 rows, u32 cols,
    then count*rows*cols unsigned bytes. Returns ``(count, rows, cols)``.
    """
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxFormatError("file too short for an IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"bad magic 0x{magic:08x}: not an IDX image file")
    if len(blob) < 16:
        raise IdxFormatError("truncated IDX header")
    count, rows, cols = struct.unpack(">III", blob[4:16])
    need = count * rows * cols
    payload = blob[16:16 + need]
    if len(payload) < need:
        raise IdxFormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
    if limit is not None:
        images = images[:limit]
    out = images.astype(np.float64) / 255.0
    if downsample_to_14:
        out = downsample(out, rows // 14)
    return out
