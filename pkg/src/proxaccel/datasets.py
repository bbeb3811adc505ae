"""Synthetic test images and binary PGM input/output."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

__all__ = ["synthetic_image", "synthetic_images", "read_pgm", "write_pgm", "center_crop", "load_directory",
           "MIN_STD"]

MIN_STD = 0.05


def synthetic_image(rng: np.random.Generator, shape: tuple[int, int] = (32, 32)) -> np.ndarray:
    """Piecewise-smooth image in [0, 1]: flat rectangles plus Gaussian bumps plus mild noise.

    Values are quantized to multiples of 1/255 so that a PGM round trip is exact.
    """
    h, w = shape
    while True:
        img = np.full(shape, rng.uniform(0.2, 0.6))
        yy, xx = np.mgrid[:h, :w]
        for _ in range(rng.integers(2, 6)):
            r0, c0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
            rh, rw = rng.integers(4, max(5, h // 2)), rng.integers(4, max(5, w // 2))
            img[r0:r0 + rh, c0:c0 + rw] = rng.uniform(0, 1)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            s = rng.uniform(2, min(h, w) / 4)
            img += rng.uniform(-0.4, 0.4) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += 0.02 * rng.standard_normal(shape)
        img -= img.min()
        img /= img.max()
        img = np.round(img * 255) / 255
        if img.std() > MIN_STD:
            return img


def synthetic_images(count: int, seed: int, shape: tuple[int, int] = (32, 32)) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, shape) for _ in range(count)]


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 with maxval 255; ``image`` is in [0, 1]."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    data = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(data.tobytes())


_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (8 or 16 bit) as floats in [0, 1]."""
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if not m:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h
    body = np.frombuffer(raw, dtype=dtype, count=count, offset=m.end())
    return body.reshape(h, w).astype(float) / maxval


def center_crop(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = image.shape
    th, tw = shape
    if h < th or w < tw:
        raise ValueError(f"image {image.shape} smaller than crop {tuple(shape)}")
    r, c = (h - th) // 2, (w - tw) // 2
    return image[r:r + th, c:c + tw]


def load_directory(directory, shape: tuple[int, int] | None = None) -> list[np.ndarray]:
    """All ``*.pgm`` files in name order, center cropped to ``shape`` when given."""
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        raise FileNotFoundError(f"no .pgm images in {os.fspath(directory)}")
    out = []
    for f in files:
        img = read_pgm(f)
        out.append(center_crop(img, shape) if shape is not None else img)
    return out
