"""Quality metrics and Bjøntegaard deltas."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["RDPoint", "psnr", "ssim_components", "ms_ssim", "bd_metrics", "PSNR_CAP", "MS_SSIM_WEIGHTS"]

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr_db: float
    ms_ssim: float = 1.0

    def __post_init__(self):
        if self.bpp < 0:
            raise ValueError("bpp must be non-negative")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical images give ``PSNR_CAP``."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation over the last two axes
    k = len(g)
    rows = sliding_window_view(img, k, axis=-1) @ g
    return sliding_window_view(rows, k, axis=-2) @ g


def ssim_components(a, b, win=11, sigma=1.5, data_range=1.0):
    """Mean luminance*structure (SSIM) and contrast-structure terms per channel."""
    g = _gaussian_window(win, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a ** 2
    s_bb = _filter_valid(b * b, g) - mu_b ** 2
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    cs_map = (2 * s_ab + c2) / (s_aa + s_bb + c2)
    l_map = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    axes = (-2, -1)
    return (l_map * cs_map).mean(axis=axes), cs_map.mean(axis=axes)


def _pool2(x):
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def ms_ssim(a, b, win=11, sigma=1.5, weights: Sequence[float] = MS_SSIM_WEIGHTS) -> float:
    """Multi-scale SSIM of two (C, H, W) or (H, W) images in [0, 1].

    Uses as many of the 5 scales as fit (each scale needs ``win`` pixels);
    with fewer scales the leading weights are renormalized to sum to one.
    Channel scores are averaged.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    side = min(a.shape[-2:])
    if side < win:
        raise ValueError(f"image side {side} smaller than the {win}-pixel window")
    levels = 1
    while levels < len(weights) and side // (2 ** levels) >= win:
        levels += 1
    w = np.asarray(weights[:levels], dtype=np.float64)
    w = w / w.sum()
    cs_terms = []
    for level in range(levels):
        ssim_val, cs = ssim_components(a, b, win, sigma)
        if level < levels - 1:
            cs_terms.append(cs)
            a, b = _pool2(a), _pool2(b)
    vals = np.stack(cs_terms + [ssim_val])  # (levels, C)
    vals = np.maximum(vals, 0.0)
    score = np.prod(vals ** w[:, None], axis=0)
    return float(np.mean(score))


def _curve_arrays(curve):
    pts = sorted(curve, key=lambda p: p.bpp)
    rate = np.array([p.bpp for p in pts], dtype=np.float64)
    quality = np.array([p.psnr_db for p in pts], dtype=np.float64)
    if len(pts) < 4:
        raise ValueError("Bjøntegaard fit needs at least 4 points per curve")
    if np.any(rate <= 0):
        raise ValueError("rates must be positive for the log-rate fit")
    return np.log2(rate), quality


def _avg_poly_gap(xa, ya, xb, yb):
    lo = max(xa.min(), xb.min())
    hi = min(xa.max(), xb.max())
    if not hi > lo:
        raise ValueError("curves do not overlap")
    pa = np.polyint(np.polyfit(xa, ya, 3))
    pb = np.polyint(np.polyfit(xb, yb, 3))
    ia = np.polyval(pa, hi) - np.polyval(pa, lo)
    ib = np.polyval(pb, hi) - np.polyval(pb, lo)
    return (ib - ia) / (hi - lo)


def bd_metrics(curve_a, curve_b, mode: str = "bd_psnr") -> float:
    """Bjøntegaard delta of ``curve_b`` relative to ``curve_a``.

    ``bd_psnr``: average PSNR gain in dB over the shared log-rate range.
    ``bd_rate``: average rate change in percent at equal PSNR (negative means
    ``curve_b`` needs fewer bits). Cubic fits in log2-rate.
    """
    ra, qa = _curve_arrays(curve_a)
    rb, qb = _curve_arrays(curve_b)
    if mode == "bd_psnr":
        return float(_avg_poly_gap(ra, qa, rb, qb))
    if mode == "bd_rate":
        gap = _avg_poly_gap(qa, ra, qb, rb)
        return float((2.0 ** gap - 1.0) * 100.0)
    raise ValueError(f"mode must be 'bd_psnr' or 'bd_rate', got {mode!r}")
