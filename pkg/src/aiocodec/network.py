"""Hybrid-attention transformer blocks and the feature encoder/decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Tuple

import torch
import torch.nn as nn

from . import tensor as T

__all__ = [
    "AttentionConfig",
    "CodecArchitecture",
    "PROFILES",
    "get_profile",
    "Conv2d",
    "LayerNorm2d",
    "ChannelGroupAttention",
    "SpatialDecoupledAttention",
    "GatedFFN",
    "HATB",
    "FeatureEncoder",
    "FeatureDecoder",
]


@dataclass(frozen=True)
class AttentionConfig:
    n_groups: int = 4
    group_channels: int = 32
    k_vertical: int = 5
    k_horizontal: int = 5
    sigmoid_on_attention: bool = False
    spatial_decoupling: bool = True
    ffn_expansion: float = 2.0

    def __post_init__(self):
        if self.n_groups < 1 or self.group_channels < 1:
            raise ValueError("n_groups and group_channels must be positive")
        if self.k_vertical % 2 == 0 or self.k_horizontal % 2 == 0:
            raise ValueError("directional kernel sizes must be odd")

    @property
    def channels(self) -> int:
        return self.n_groups * self.group_channels


@dataclass(frozen=True)
class CodecArchitecture:
    n_stages: int = 4
    blocks_per_stage: int = 4
    latent_channels: int = 192
    hyper_channels: int = 64
    resample_factors: Tuple[int, ...] = (2, 2, 2, 2)
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if len(self.resample_factors) != self.n_stages:
            raise ValueError("one resample factor per stage required")

    @property
    def stage_width(self) -> int:
        return self.attention.channels

    @property
    def downsampling(self) -> int:
        return math.prod(self.resample_factors)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resample_factors"] = list(self.resample_factors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CodecArchitecture":
        d = dict(d)
        d["attention"] = AttentionConfig(**d["attention"])
        d["resample_factors"] = tuple(d["resample_factors"])
        return cls(**d)


PROFILES = {
    # desk-scale profile used by the tests and the smoke/learning runs
    "tiny": CodecArchitecture(
        blocks_per_stage=2,
        latent_channels=64,
        hyper_channels=32,
        attention=AttentionConfig(n_groups=4, group_channels=8),
    ),
    "ours-s": CodecArchitecture(attention=AttentionConfig(n_groups=4, group_channels=32)),
    "ours-l": CodecArchitecture(attention=AttentionConfig(n_groups=4, group_channels=48)),
}


def get_profile(name: str) -> CodecArchitecture:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


# ---------------------------------------------------------------------------
# primitive layers


class Conv2d(nn.Module):
    """Convolution routed through :func:`aiocodec.tensor.conv2d` (MAC-counted)."""

    def __init__(self, c_in, c_out, kernel_size=1, stride=1, groups=1, bias=True):
        super().__init__()
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        self.stride = stride
        self.groups = groups
        self.pad = (kh // 2, kw // 2)
        self.weight = nn.Parameter(torch.empty(c_out, c_in // groups, kh, kw))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        # unit-gain uniform init: deep linear resampling chains otherwise shrink
        # activations ~3x per layer and barely train
        fan_in = (c_in // groups) * kh * kw
        bound = math.sqrt(3.0 / fan_in)
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)


def dwconv(c, kernel_size):
    return Conv2d(c, c, kernel_size, groups=c)


class LayerNorm2d(nn.Module):
    def __init__(self, c, eps=1e-6):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(c))
        self.beta = nn.Parameter(torch.zeros(c))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


# ---------------------------------------------------------------------------
# attention blocks


class ChannelGroupAttention(nn.Module):
    """Self-attention across channels, computed independently per channel group.

    Each group yields a ``C_g x C_g`` score matrix, so cost is linear in H*W.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.qkv = Conv2d(c, 3 * c, 1)
        self.qkv_dw = dwconv(3 * c, 3)
        self.proj = Conv2d(c, c, 1)

    def attention_maps(self, x):
        """Return (attn, v) with attn of shape (N, N_g, C_g, C_g)."""
        n, c, h, w = x.shape
        g, cg = self.cfg.n_groups, self.cfg.group_channels
        if c != g * cg:
            raise T.ShapeError("cga", f"channels must equal N_g*C_g={g * cg}", x.shape)
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        # rows are channel tokens: (N, N_g, C_g, HW)
        q = q.reshape(n, g, cg, h * w)
        k = k.reshape(n, g, cg, h * w)
        v = v.reshape(n, g, cg, h * w)
        scores = T.matmul(q, k.transpose(-1, -2)) / math.sqrt(cg)
        return T.softmax(scores, axis=-1), v

    def forward(self, x):
        n, c, h, w = x.shape
        attn, v = self.attention_maps(x)
        out = T.matmul(attn, v).reshape(n, c, h, w)
        return self.proj(out)


class SpatialDecoupledAttention(nn.Module):
    """Convolutional attention: ``Linear(A * V)`` with A from directional depth-wise convs."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.value = Conv2d(c, c, 1)
        self.attn_in = Conv2d(c, c, 1)
        if cfg.spatial_decoupling:
            self.attn_v = dwconv(c, (1, cfg.k_vertical))
            self.attn_h = dwconv(c, (cfg.k_horizontal, 1))
        else:
            self.attn_vh = dwconv(c, (cfg.k_horizontal, cfg.k_vertical))
        self.proj = Conv2d(c, c, 1)

    def attention_map(self, x):
        a = self.attn_in(x)
        if self.cfg.spatial_decoupling:
            a = self.attn_h(self.attn_v(a))
        else:
            a = self.attn_vh(a)
        if self.cfg.sigmoid_on_attention:
            a = torch.sigmoid(a)
        return a

    def forward(self, x):
        if x.shape[1] != self.cfg.channels:
            raise T.ShapeError("sda", f"expected {self.cfg.channels} channels", x.shape)
        return self.proj(self.attention_map(x) * self.value(x))


class GatedFFN(nn.Module):
    def __init__(self, c, expansion=2.0):
        super().__init__()
        hidden = int(round(c * expansion))
        self.hidden = hidden
        self.project_in = Conv2d(c, 2 * hidden, 1)
        self.dw = dwconv(2 * hidden, 3)
        self.project_out = Conv2d(hidden, c, 1)

    def forward(self, x):
        gate, value = self.dw(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(T.gelu(gate) * value)


class HATB(nn.Module):
    """Pre-norm residual stack: C-GA, then S-DA, then gated FFN."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        c = cfg.channels
        self.norm1 = LayerNorm2d(c)
        self.cga = ChannelGroupAttention(cfg)
        self.norm2 = LayerNorm2d(c)
        self.sda = SpatialDecoupledAttention(cfg)
        self.norm3 = LayerNorm2d(c)
        self.ffn = GatedFFN(c, cfg.ffn_expansion)
        # each block starts as the identity
        for out in (self.cga.proj, self.sda.proj, self.ffn.project_out):
            nn.init.zeros_(out.weight)
            nn.init.zeros_(out.bias)

    def forward(self, x):
        x = x + self.cga(self.norm1(x))
        x = x + self.sda(self.norm2(x))
        return x + self.ffn(self.norm3(x))


# ---------------------------------------------------------------------------
# encoder / decoder


class Downsample(nn.Module):
    def __init__(self, c_in, c_out, r):
        super().__init__()
        if c_out % (r * r):
            raise ValueError(f"output width {c_out} not divisible by {r * r}")
        self.r = r
        self.conv = Conv2d(c_in, c_out // (r * r), 3)

    def forward(self, x):
        return T.pixel_shuffle(self.conv(x), self.r, "down")


class Upsample(nn.Module):
    def __init__(self, c_in, c_out, r):
        super().__init__()
        self.r = r
        self.conv = Conv2d(c_in, c_out * r * r, 3)

    def forward(self, x):
        return T.pixel_shuffle(self.conv(x), self.r, "up")


class FeatureEncoder(nn.Module):
    """Image (N,3,H,W) in [0,1] -> latent y (N, C_y, H/16, W/16)."""

    def __init__(self, arch: CodecArchitecture):
        super().__init__()
        c = arch.stage_width
        self.arch = arch
        stages = []
        c_in = 3
        for r in arch.resample_factors:
            blocks = [HATB(arch.attention) for _ in range(arch.blocks_per_stage)]
            stages.append(nn.Sequential(Downsample(c_in, c, r), *blocks))
            c_in = c
        self.stages = nn.Sequential(*stages)
        self.head = Conv2d(c, arch.latent_channels, 3)

    def forward(self, x):
        f = self.arch.downsampling
        if x.dim() != 4 or x.shape[1] != 3:
            raise T.ShapeError("encode_features", "expected (N,3,H,W) image", x.shape)
        if x.shape[2] < f or x.shape[3] < f:
            raise ValueError(f"image smaller than {f}x{f}: {tuple(x.shape[2:])}")
        if x.shape[2] % f or x.shape[3] % f:
            raise T.ShapeError("encode_features", f"H, W must be multiples of {f} (pad first)", x.shape)
        return self.head(self.stages(x))


class FeatureDecoder(nn.Module):
    """Latent y_hat -> image; mirror of :class:`FeatureEncoder`."""

    def __init__(self, arch: CodecArchitecture):
        super().__init__()
        c = arch.stage_width
        self.arch = arch
        self.stem = Conv2d(arch.latent_channels, c, 3)
        stages = []
        factors = tuple(reversed(arch.resample_factors))
        for i, r in enumerate(factors):
            c_out = 3 if i == len(factors) - 1 else c
            blocks = [HATB(arch.attention) for _ in range(arch.blocks_per_stage)]
            stages.append(nn.Sequential(*blocks, Upsample(c, c_out, r)))
        self.stages = nn.Sequential(*stages)

    def forward(self, y_hat, original_dims=None, clamp=True):
        """Decode; crop to ``original_dims=(H, W)`` when given and clamp to [0,1]."""
        if y_hat.dim() != 4 or y_hat.shape[1] != self.arch.latent_channels:
            raise T.ShapeError("decode_features", f"expected C_y={self.arch.latent_channels}", y_hat.shape)
        x = self.stages(self.stem(y_hat))
        if original_dims is not None:
            h, w = original_dims
            f = self.arch.downsampling
            if not (0 < h <= x.shape[2] and 0 < w <= x.shape[3]) or x.shape[2] - h >= f or x.shape[3] - w >= f:
                raise ValueError(
                    f"dims {(h, w)} inconsistent with latent {tuple(y_hat.shape[2:])} (x{f})"
                )
            x = x[:, :, :h, :w]
        return x.clamp(0.0, 1.0) if clamp else x
