"""Quantization, hyperprior and the two-pass Gaussian conditional."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensor as T
from .network import Conv2d, Upsample

__all__ = [
    "SIGMA_MIN",
    "PROB_FLOOR",
    "QUALITY_STEP_MULTIPLIERS",
    "GaussianParams",
    "LatentPair",
    "quantize",
    "round_ste",
    "checkerboard_mask",
    "gaussian_interval_prob",
    "rate_estimate",
    "factorized_rate",
    "HyperEncoder",
    "HyperDecoder",
    "SpatialContext",
    "FactorizedPrior",
]

SIGMA_MIN = 1e-4
PROB_FLOOR = 2.0 ** -16

# quality index -> multiplier on the learned per-channel step (index 3 = finest)
QUALITY_STEP_MULTIPLIERS = (2.0 ** 0.5, 1.0, 2.0 ** -0.5, 0.5)


@dataclass
class GaussianParams:
    mu: torch.Tensor
    sigma: torch.Tensor


@dataclass
class LatentPair:
    y: torch.Tensor
    y_hat: torch.Tensor
    z: torch.Tensor
    z_hat: torch.Tensor
    anchor_mask: torch.Tensor
    params_anchor: GaussianParams
    params_nonanchor: GaussianParams
    q_step: torch.Tensor


def round_ste(x: torch.Tensor) -> torch.Tensor:
    """Round in the forward pass, identity in the backward pass."""
    return x + (torch.round(x) - x).detach()


def quantize(y: torch.Tensor, q_step: torch.Tensor, mode: str = "infer") -> torch.Tensor:
    """Snap ``y`` to the per-channel grid ``k * q_step``.

    ``q_step`` is (C,) or broadcastable to ``y``. In ``train`` mode the
    rounding is straight-through, so ``y`` sees an identity gradient and
    ``q_step`` receives ``round(y/q) - y/q``.
    """
    if q_step.dim() == 1:
        q_step = q_step.view(1, -1, 1, 1)
    if bool((q_step <= 0).any()):
        raise ValueError("quantization step must be positive")
    if mode == "infer":
        return torch.round(y / q_step) * q_step
    if mode == "train":
        return round_ste(y / q_step) * q_step
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def checkerboard_mask(h: int, w: int, device=None) -> torch.Tensor:
    """Boolean (h, w) grid, True at anchors where (row + col) is even."""
    ii = torch.arange(h, device=device).view(-1, 1)
    jj = torch.arange(w, device=device).view(1, -1)
    return (ii + jj) % 2 == 0


def _std_normal_cdf(x):
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def gaussian_interval_prob(value, mu, sigma, width):
    """P(value - width/2 < X < value + width/2) for X ~ N(mu, sigma^2).

    Evaluated on the lower tail (|value - mu| mirrored) for accuracy;
    the result is exactly symmetric in ``value - mu``.
    """
    d = -torch.abs(value - mu)
    half = 0.5 * width
    return _std_normal_cdf((d + half) / sigma) - _std_normal_cdf((d - half) / sigma)


def _bits(p):
    return -torch.log2(p.clamp_min(PROB_FLOOR)).sum()


def rate_estimate(y_hat, params: GaussianParams, q_step, mask: Optional[torch.Tensor] = None):
    """Bits to code ``y_hat`` under the quantized Gaussian; optional position mask."""
    if torch.is_tensor(q_step) and q_step.dim() == 1:
        q_step = q_step.view(1, -1, 1, 1)
    p = gaussian_interval_prob(y_hat, params.mu, params.sigma, q_step)
    if mask is not None:
        p = torch.where(mask, p, torch.ones_like(p))
    return _bits(p)


def factorized_rate(z_hat, prior: "FactorizedPrior"):
    """Bits for ``z_hat`` under the per-channel Gaussian prior with unit bins."""
    mu, sigma = prior.params()
    p = gaussian_interval_prob(z_hat, mu.view(1, -1, 1, 1), sigma.view(1, -1, 1, 1), 1.0)
    return _bits(p)


def _positive_scale(raw):
    return F.softplus(raw).clamp_min(SIGMA_MIN)


class HyperEncoder(nn.Module):
    """y -> z with two stride-2 stages; z spatial = ceil(y / 4)."""

    def __init__(self, c_y, c_z):
        super().__init__()
        self.conv1 = Conv2d(c_y, c_z, 3, stride=2)
        self.conv2 = Conv2d(c_z, c_z, 3, stride=2)

    def forward(self, y):
        return self.conv2(T.gelu(self.conv1(y)))


class HyperDecoder(nn.Module):
    """z_hat -> (mu0, sigma0) at every y position."""

    def __init__(self, c_y, c_z):
        super().__init__()
        self.up1 = Upsample(c_z, c_z, 2)
        self.up2 = Upsample(c_z, c_z, 2)
        self.out = Conv2d(c_z, 2 * c_y, 3)

    def forward(self, z_hat, y_size) -> GaussianParams:
        h, w = y_size
        f = self.out(T.gelu(self.up2(T.gelu(self.up1(z_hat)))))
        if f.shape[2] < h or f.shape[3] < w:
            raise T.ShapeError("hyper_decode", f"cannot cover y of size {(h, w)}", f.shape)
        f = f[:, :, :h, :w]
        mu, raw = f.chunk(2, dim=1)
        return GaussianParams(mu, _positive_scale(raw))


class SpatialContext(nn.Module):
    """Refine non-anchor parameters from decoded anchors plus the hyperprior output.

    The context branch only sees ``y_hat * anchor_mask``; the fusion layer is
    affine in (context, mu0, sigma0).
    """

    def __init__(self, c_y, kernel_size=5):
        super().__init__()
        self.ctx1 = Conv2d(c_y, c_y, kernel_size)
        self.ctx2 = Conv2d(c_y, c_y, 1)
        self.fuse = Conv2d(3 * c_y, 2 * c_y, 1)

    def forward(self, y_hat_anchors, base: GaussianParams, anchor_mask) -> GaussianParams:
        if tuple(anchor_mask.shape) != tuple(y_hat_anchors.shape[-2:]):
            raise T.ShapeError("spatial_context", "mask does not match latent grid",
                               anchor_mask.shape, y_hat_anchors.shape)
        masked = y_hat_anchors * anchor_mask.to(y_hat_anchors.dtype)
        ctx = self.ctx2(T.gelu(self.ctx1(masked)))
        f = self.fuse(torch.cat([ctx, base.mu, base.sigma], dim=1))
        mu, raw = f.chunk(2, dim=1)
        return GaussianParams(mu, _positive_scale(raw))


class FactorizedPrior(nn.Module):
    """Per-channel learnable Gaussian for the hyper-latent."""

    def __init__(self, c_z, init_scale=4.0):
        super().__init__()
        self.mu = nn.Parameter(torch.zeros(c_z))
        self.log_sigma = nn.Parameter(torch.full((c_z,), math.log(init_scale)))

    def params(self):
        return self.mu, self.log_sigma.exp().clamp_min(SIGMA_MIN)
