"""The end-to-end codec: feature transforms, entropy model and bitstream coding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rangecoder
from .container import ContainerError, ContainerMeta, read_container, write_container
from .entropy import (
    QUALITY_STEP_MULTIPLIERS,
    FactorizedPrior,
    GaussianParams,
    HyperDecoder,
    HyperEncoder,
    LatentPair,
    SpatialContext,
    checkerboard_mask,
    factorized_rate,
    quantize,
    rate_estimate,
)
from .network import CodecArchitecture, FeatureDecoder, FeatureEncoder, get_profile

__all__ = ["AIOCodec", "CompressResult", "pad_image", "compress", "decompress", "N_QUALITIES"]

N_QUALITIES = len(QUALITY_STEP_MULTIPLIERS)
# decoder refuses headers claiming more pixels than this (4096 x 4096)
MAX_DECODE_PIXELS = 1 << 24
_INT16 = 32768


class AIOCodec(nn.Module):
    def __init__(self, arch: CodecArchitecture | str = "tiny"):
        super().__init__()
        if isinstance(arch, str):
            arch = get_profile(arch)
        self.arch = arch
        c_y, c_z = arch.latent_channels, arch.hyper_channels
        self.encoder = FeatureEncoder(arch)
        self.decoder = FeatureDecoder(arch)
        self.hyper_encoder = HyperEncoder(c_y, c_z)
        self.hyper_decoder = HyperDecoder(c_y, c_z)
        self.context = SpatialContext(c_y)
        self.z_prior = FactorizedPrior(c_z)
        self.log_q_step = nn.Parameter(torch.zeros(c_y))

    def q_step(self, quality: int) -> torch.Tensor:
        if not 0 <= quality < N_QUALITIES:
            raise ValueError(f"quality index must be in 0..{N_QUALITIES - 1}, got {quality}")
        return self.log_q_step.exp() * QUALITY_STEP_MULTIPLIERS[quality]

    def forward(self, x, quality: int, noise: Optional[torch.Tensor] = None,
                y_noise: Optional[torch.Tensor] = None):
        """Differentiable training pass.

        ``noise`` is the U(-1/2, 1/2) sample added to z; when omitted, z is
        rounded (as at inference) and receives no gradient through rounding.
        ``y`` is quantized straight-through unless ``y_noise`` (same shape as
        y, entries in [-1/2, 1/2)) is given, in which case ``y + q * y_noise``
        is used instead: a smooth relaxation whose gradients can be checked
        by finite differences.

        Returns a dict with ``x_hat`` (unclamped), ``bits_y``, ``bits_z`` and
        the :class:`LatentPair`.
        """
        y = self.encoder(x)
        z = self.hyper_encoder(y)
        z_hat = z + noise if noise is not None else torch.round(z)
        base = self.hyper_decoder(z_hat, y.shape[-2:])
        q = self.q_step(quality)
        if y_noise is None:
            y_hat = quantize(y, q, "train")
        else:
            y_hat = y + q.view(1, -1, 1, 1) * y_noise
        mask = checkerboard_mask(*y.shape[-2:], device=y.device)
        refined = self.context(y_hat, base, mask)
        qv = q.view(1, -1, 1, 1)
        bits_y = rate_estimate(y_hat, base, qv, mask) + rate_estimate(y_hat, refined, qv, ~mask)
        bits_z = factorized_rate(z_hat, self.z_prior)
        x_hat = self.decoder(y_hat, clamp=False)
        latents = LatentPair(y, y_hat, z, z_hat, mask, base, refined, q)
        return {"x_hat": x_hat, "bits_y": bits_y, "bits_z": bits_z, "latents": latents}


# ---------------------------------------------------------------------------
# real coding


@dataclass
class CompressResult:
    data: bytes
    x_hat: np.ndarray  # encoder-side reconstruction, (3, H, W) float32 in [0, 1]
    bpp: float
    rate_estimate_bits: float
    z_bits: int
    y_bits: int


def pad_image(x: torch.Tensor, multiple: int):
    """Edge-replicate (N,C,H,W) on the bottom/right to a multiple of ``multiple``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, ph, pw


def _to_tensor(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[0] != 1 or image.shape[1] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(image.shape)}")
    return image.float()


def _f64(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().double().numpy()


def _z_tables(model: AIOCodec, shape):
    mu, sigma = model.z_prior.params()
    c = shape[1]
    mu = np.broadcast_to(_f64(mu).reshape(1, c, 1, 1), shape)
    sigma = np.broadcast_to(_f64(sigma).reshape(1, c, 1, 1), shape)
    return rangecoder.build_cdfs(mu, sigma, 1.0)


def _y_tables(params: GaussianParams, q: torch.Tensor, positions: np.ndarray):
    shape = params.mu.shape
    qb = np.broadcast_to(_f64(q).reshape(1, -1, 1, 1), shape)
    return rangecoder.build_cdfs(_f64(params.mu)[positions], _f64(params.sigma)[positions], qb[positions])


def _clip_to_tables(k: np.ndarray, tables: rangecoder.TableSet) -> np.ndarray:
    t = tables.index
    center = tables.s_min[t] + (tables.n_in[t] - 1) // 2
    return np.clip(k, center - _INT16, center + _INT16 - 1)


def _hyper(model, z_k: np.ndarray, y_size):
    z_hat = torch.from_numpy(z_k.astype(np.float32))
    return model.hyper_decoder(z_hat, y_size)


def _anchor_positions(mask: torch.Tensor, shape):
    full = np.broadcast_to(mask.cpu().numpy()[None, None], shape)
    return full, ~full


def _dequantize(k: np.ndarray, q: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(k.astype(np.float32)) * q.view(1, -1, 1, 1)


@torch.no_grad()
def compress(model: AIOCodec, image, quality: int, model_hash: int) -> CompressResult:
    """Compress a (3, H, W) image in [0, 1] to container bytes."""
    x = _to_tensor(image)
    h, w = x.shape[-2:]
    if h > 0xFFFF or w > 0xFFFF:
        raise ValueError("image too large for the container")
    f = model.arch.downsampling
    if h < f or w < f:
        raise ValueError(f"image smaller than {f}x{f}")
    xp, ph, pw = pad_image(x, f)
    q = model.q_step(quality)

    y = model.encoder(xp)
    z = model.hyper_encoder(y)
    z_tables = _z_tables(model, tuple(z.shape))
    z_k = _clip_to_tables(np.round(_f64(z)).astype(np.int64).ravel(), z_tables).reshape(z.shape)
    base = _hyper(model, z_k, y.shape[-2:])

    mask = checkerboard_mask(*y.shape[-2:])
    anchors, non_anchors = _anchor_positions(mask, tuple(y.shape))
    k = torch.round(y / q.view(1, -1, 1, 1)).double().numpy().astype(np.int64)

    a_tables = _y_tables(base, q, anchors)
    k[anchors] = _clip_to_tables(k[anchors], a_tables)
    k_anchor = np.where(anchors, k, 0)
    refined = model.context(_dequantize(k_anchor, q), base, mask)
    n_tables = _y_tables(refined, q, non_anchors)
    k[non_anchors] = _clip_to_tables(k[non_anchors], n_tables)

    z_bytes = rangecoder.encode_symbols(z_k.ravel(), z_tables)
    y_bytes = rangecoder.encode_symbols(np.concatenate([k[anchors], k[non_anchors]]),
                                        _concat_tables(a_tables, n_tables))
    meta = ContainerMeta(quality, model_hash, int(w), int(h), ph, pw)
    data = write_container(meta, z_bytes, y_bytes)

    y_hat = _dequantize(k, q)
    x_hat = model.decoder(y_hat, (h, w))
    est = (rangecoder.analytic_bits(z_k.ravel(), z_tables)
           + rangecoder.analytic_bits(k[anchors], a_tables)
           + rangecoder.analytic_bits(k[non_anchors], n_tables))
    return CompressResult(
        data=data,
        x_hat=x_hat[0].numpy(),
        bpp=8.0 * len(data) / (h * w),
        rate_estimate_bits=est,
        z_bits=8 * len(z_bytes),
        y_bits=8 * len(y_bytes),
    )


def _concat_tables(a: rangecoder.TableSet, b: rangecoder.TableSet) -> rangecoder.TableSet:
    shift = len(a.cdf)
    return rangecoder.TableSet(
        np.concatenate([a.cdf, b.cdf]),
        np.concatenate([a.offset, b.offset + shift]),
        np.concatenate([a.s_min, b.s_min]),
        np.concatenate([a.n_in, b.n_in]),
        np.concatenate([a.index, b.index + len(a.offset)]),
    )


@torch.no_grad()
def decompress(model: AIOCodec, data: bytes, model_hash: Optional[int] = None,
               max_pixels: int = MAX_DECODE_PIXELS) -> np.ndarray:
    """Decode container bytes to a (3, H, W) float32 image in [0, 1].

    Raises :class:`~aiocodec.container.ContainerError` or
    :class:`~aiocodec.rangecoder.DecodeError` on bad input.
    """
    meta, z_bytes, y_bytes = read_container(data, model_hash)
    if meta.width * meta.height > max_pixels:
        raise ContainerError("dims", f"{meta.width}x{meta.height} exceeds the {max_pixels}-pixel decode limit")
    f = model.arch.downsampling
    hp, wp = meta.height + meta.pad_h, meta.width + meta.pad_w
    if hp % f or wp % f:
        raise rangecoder.DecodeError(f"padded size {hp}x{wp} not a multiple of {f}")
    q = model.q_step(meta.quality)
    c_y, c_z = model.arch.latent_channels, model.arch.hyper_channels
    y_size = (hp // f, wp // f)
    z_shape = (1, c_z, -(-y_size[0] // 4), -(-y_size[1] // 4))
    y_shape = (1, c_y) + y_size

    z_tables = _z_tables(model, z_shape)
    z_k = rangecoder.decode_symbols(z_bytes, z_tables, len(z_tables)).reshape(z_shape)
    base = _hyper(model, z_k, y_size)

    mask = checkerboard_mask(*y_size)
    anchors, non_anchors = _anchor_positions(mask, y_shape)
    a_tables = _y_tables(base, q, anchors)
    # y payload holds anchors then non-anchors; decode the anchors first
    n_a = len(a_tables)
    k = np.zeros(y_shape, np.int64)
    dec = _TwoPassDecoder(y_bytes)
    k[anchors] = dec.first(a_tables)
    refined = model.context(_dequantize(np.where(anchors, k, 0), q), base, mask)
    n_tables = _y_tables(refined, q, non_anchors)
    k[non_anchors] = dec.second(a_tables, n_tables, n_a)
    x_hat = model.decoder(_dequantize(k, q), (meta.height, meta.width))
    return x_hat[0].numpy()


class _TwoPassDecoder:
    """Decodes one payload whose second-half tables depend on the first half.

    The range decoder is restarted over the concatenated table list once the
    second-pass tables are known; the first-pass symbols are decoded again,
    which is cheap and keeps the coder kernel single-pass.
    """

    def __init__(self, payload: bytes):
        self.payload = payload

    def first(self, a_tables):
        self._prefix = rangecoder.decode_prefix(self.payload, a_tables)
        return self._prefix

    def second(self, a_tables, n_tables, n_a):
        both = _concat_tables(a_tables, n_tables)
        out = rangecoder.decode_symbols(self.payload, both, len(both))
        if not np.array_equal(out[:n_a], self._prefix):
            raise rangecoder.DecodeError("anchor pass inconsistent between decoder passes")
        return out[n_a:]
