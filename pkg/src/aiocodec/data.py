"""Procedural clean-image corpus for desk-scale training and evaluation."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

__all__ = ["synthetic_image", "synthetic_corpus", "random_crop"]


def synthetic_image(size: int, seed: int) -> np.ndarray:
    """A smooth piecewise image: colour gradient, soft shapes and a low-frequency texture."""
    rng = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / size
    img = np.empty((3, h, w))
    a, b = rng.uniform(-0.5, 0.5, (2, 3))
    base = rng.uniform(0.25, 0.75, 3)
    for c in range(3):
        img[c] = base[c] + a[c] * (xx - 0.5) + b[c] * (yy - 0.5)
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0.0, 1.0, 3)
        cy, cx = rng.uniform(0, 1, 2)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.3)
            inside = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
        else:
            hy, hx = rng.uniform(0.08, 0.3, 2)
            inside = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        soft = ndimage.gaussian_filter(inside.astype(np.float64), 0.8)
        img = img * (1 - soft) + color[:, None, None] * soft
    fy, fx = rng.uniform(1.0, 4.0, 2)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.0, 0.08)
    img += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_corpus(n: int, size: int = 64, seed: int = 0):
    return [synthetic_image(size, seed * 1_000_003 + i) for i in range(n)]


def random_crop(img: np.ndarray, patch: int, rng: np.random.Generator, flips: bool = True) -> np.ndarray:
    _, h, w = img.shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} larger than image {h}x{w}")
    r = int(rng.integers(0, h - patch + 1))
    c = int(rng.integers(0, w - patch + 1))
    out = img[:, r:r + patch, c:c + patch]
    if flips:
        if rng.random() < 0.5:
            out = out[:, :, ::-1]
        if rng.random() < 0.5:
            out = out[:, ::-1, :]
    return np.ascontiguousarray(out)
