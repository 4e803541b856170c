"""Seeded degradation synthesis and the training-time sampling policy.

Rain, snow and haze are procedural stand-ins for weather datasets: they
reproduce the qualitative patterns (oriented streaks, spots, veiling)
without any claim of matching a real dataset's statistics. Gaussian noise
follows the standard additive model exactly.

Images are float arrays of shape (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np
from scipy import ndimage

__all__ = [
    "KINDS",
    "CLEAN_PROBABILITY",
    "TRAIN_NOISE_LEVELS",
    "EVAL_NOISE_LEVELS",
    "DegradationSpec",
    "add_gaussian_noise",
    "synth_rain",
    "synth_snow",
    "synth_haze",
    "apply_degradation",
    "sample_degradation",
    "parse_policy",
    "load_policy",
]

KINDS = ("clean", "gaussian_noise", "rain", "snow", "haze")
CLEAN_PROBABILITY = 0.2
TRAIN_NOISE_LEVELS = (15.0, 25.0, 50.0)
EVAL_NOISE_LEVELS = (35.0, 45.0, 55.0)

# accepted ranges for explicit parameters
RAIN_LIMITS = {"angle": (70.0, 110.0), "length": (1.0, 64.0), "density": (0.0, 0.2), "brightness": (0.0, 1.0)}
SNOW_LIMITS = {"density": (0.0, 0.05), "r_min": (0.5, 8.0), "r_max": (0.5, 8.0), "opacity": (0.0, 1.0)}
HAZE_LIMITS = {"t": (0.3, 1.0), "airlight": (0.7, 1.0)}

# ranges sampled by the training policy
RAIN_SAMPLING = {"angle": (70.0, 110.0), "length": (6.0, 20.0), "density": (0.002, 0.01), "brightness": (0.5, 0.9)}
SNOW_SAMPLING = {"density": (0.002, 0.01), "r_min": (0.8, 1.5), "r_max": (1.5, 3.5), "opacity": (0.6, 1.0)}
HAZE_SAMPLING = {"t": (0.3, 0.9), "airlight": (0.7, 1.0)}


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: Mapping[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")


def _check_image(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {x.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return x


def _check_ranges(params, limits, kind):
    for key, (lo, hi) in limits.items():
        if key not in params:
            raise ValueError(f"{kind}: missing parameter {key!r}")
        v = float(params[key])
        if not lo <= v <= hi:
            raise ValueError(f"{kind}: {key}={v} outside [{lo}, {hi}]")
    extra = set(params) - set(limits)
    if extra:
        raise ValueError(f"{kind}: unknown parameters {sorted(extra)}")


def _rng(seed):
    return np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))


def add_gaussian_noise(x, sigma: float, seed: int, return_noise: bool = False):
    """Add i.i.d. N(0, (sigma/255)^2) noise and clip to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be non-negative, got {sigma}")
    x = _check_image(x)
    if sigma == 0:
        out = x.copy()
        noise = np.zeros_like(x)
    else:
        noise = _rng(seed).normal(0.0, sigma / 255.0, size=x.shape)
        out = np.clip(x + noise, 0.0, 1.0)
    return (out, noise) if return_noise else out


def _line_kernel(angle_deg, length):
    """Binary line of ``length`` pixels through the centre at ``angle_deg`` from horizontal."""
    half = int(math.ceil(length / 2))
    size = 2 * half + 1
    k = np.zeros((size, size))
    theta = math.radians(angle_deg)
    n = max(2, int(math.ceil(length)) * 2)
    for r in np.linspace(-length / 2, length / 2, n):
        col = int(round(half + r * math.cos(theta)))
        row = int(round(half - r * math.sin(theta)))
        k[row, col] = 1.0
    return k


def rain_mask(shape, params, seed):
    """Streak layer (H, W) in [0, 1] before it is added to the image."""
    _check_ranges(params, RAIN_LIMITS, "rain")
    h, w = shape
    if params["density"] == 0 or params["brightness"] == 0:
        return np.zeros((h, w))
    rng = _rng(seed)
    drops = (rng.random((h, w)) < params["density"]) * rng.uniform(0.5, 1.0, (h, w))
    streaks = ndimage.convolve(drops, _line_kernel(params["angle"], params["length"]), mode="wrap")
    return np.clip(streaks, 0.0, 1.0) * params["brightness"]


def synth_rain(x, params, seed):
    """Oriented motion-blurred sparse streaks, added to every channel."""
    x = _check_image(x)
    m = rain_mask(x.shape[1:], params, seed)
    return np.clip(x + m[None], 0.0, 1.0)


def synth_snow(x, params, seed):
    """Alpha-blend bright soft-edged elliptical spots onto the image."""
    x = _check_image(x)
    _check_ranges(params, SNOW_LIMITS, "snow")
    if params["r_max"] < params["r_min"]:
        raise ValueError("snow: r_max must be >= r_min")
    _, h, w = x.shape
    if params["density"] == 0 or params["opacity"] == 0:
        return x.copy()
    rng = _rng(seed)
    n = int(rng.poisson(params["density"] * h * w))
    alpha = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    cy = rng.uniform(0, h, n)
    cx = rng.uniform(0, w, n)
    ry = rng.uniform(params["r_min"], params["r_max"], n)
    rx = ry * rng.uniform(0.7, 1.3, n)
    level = rng.uniform(0.8, 1.0, n)
    for i in range(n):
        r = int(math.ceil(max(rx[i], ry[i]))) + 1
        r0, r1 = max(0, int(cy[i]) - r), min(h, int(cy[i]) + r + 1)
        c0, c1 = max(0, int(cx[i]) - r), min(w, int(cx[i]) + r + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        d = np.sqrt(((yy[r0:r1, c0:c1] - cy[i]) / ry[i]) ** 2 + ((xx[r0:r1, c0:c1] - cx[i]) / rx[i]) ** 2)
        a = params["opacity"] * level[i] * np.clip(1.5 - d, 0.0, 1.0)
        np.maximum(alpha[r0:r1, c0:c1], a, out=alpha[r0:r1, c0:c1])
    return np.clip(x * (1 - alpha[None]) + alpha[None], 0.0, 1.0)


def synth_haze(x, params, seed=0):
    """Uniform atmospheric scattering: ``x * t + airlight * (1 - t)``."""
    x = _check_image(x)
    _check_ranges(params, HAZE_LIMITS, "haze")
    t, a = float(params["t"]), float(params["airlight"])
    if t == 1.0:
        return x.copy()
    return np.clip(x * t + a * (1.0 - t), 0.0, 1.0)


def apply_degradation(x, spec: DegradationSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Returns ``(degraded, clean)``; ``clean`` is the untouched input."""
    clean = _check_image(x)
    if spec.kind == "clean":
        return clean.copy(), clean
    if spec.kind == "gaussian_noise":
        return add_gaussian_noise(clean, float(spec.params["sigma"]), spec.seed), clean
    fn = {"rain": synth_rain, "snow": synth_snow, "haze": synth_haze}[spec.kind]
    return fn(clean, spec.params, spec.seed), clean


# ---------------------------------------------------------------------------
# sampling policy


def _uniform(rng, ranges):
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in ranges.items()}


def sample_degradation(policy: Mapping, seed) -> DegradationSpec:
    """Draw one spec: clean with probability 0.2, else a kind by policy weight.

    ``policy`` maps enabled kinds to non-negative weights and may carry a
    ``noise_levels`` tuple (default 15, 25, 50). ``seed`` may be an int or a
    ``numpy.random.Generator`` (advanced in place).
    """
    weights = {k: float(v) for k, v in policy.items() if k in KINDS and k != "clean"}
    if not weights or sum(weights.values()) <= 0:
        raise ValueError("degradation policy enables no kinds")
    rng = seed if isinstance(seed, np.random.Generator) else _rng(int(seed))
    child = int(rng.integers(0, 2 ** 63))
    if rng.random() < CLEAN_PROBABILITY:
        return DegradationSpec("clean", {}, child)
    kinds = sorted(weights)
    p = np.array([weights[k] for k in kinds])
    kind = kinds[int(rng.choice(len(kinds), p=p / p.sum()))]
    if kind == "gaussian_noise":
        levels = tuple(policy.get("noise_levels", TRAIN_NOISE_LEVELS))
        params = {"sigma": float(levels[int(rng.integers(len(levels)))])}
    elif kind == "rain":
        params = _uniform(rng, RAIN_SAMPLING)
    elif kind == "snow":
        params = _uniform(rng, SNOW_SAMPLING)
    else:
        params = _uniform(rng, HAZE_SAMPLING)
    return DegradationSpec(kind, params, child)


def parse_policy(text: str) -> Dict:
    """Parse ``key = value`` lines (``#`` comments). Kinds take a weight;
    ``noise_levels`` takes a comma-separated list."""
    policy: Dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"policy line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "noise_levels":
            policy[key] = tuple(float(v) for v in value.split(",") if v.strip())
        elif key in KINDS and key != "clean":
            policy[key] = float(value)
        else:
            raise ValueError(f"policy line {lineno}: unknown key {key!r}")
    return policy


def load_policy(path) -> Dict:
    return parse_policy(Path(path).read_text())
