"""Rate-distortion training."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import tensor as T
from .checkpoint import atomic_write, save_checkpoint
from .data import random_crop
from .degrade import KINDS, apply_degradation, sample_degradation
from .model import N_QUALITIES, AIOCodec

__all__ = [
    "DISTORTION_SCALE",
    "TrainConfig",
    "TrainingDiverged",
    "NonFiniteGradient",
    "rd_loss",
    "adam_step",
    "cosine_lr",
    "progressive_schedule",
    "clip_grad_norm",
    "parse_config",
    "load_config",
    "train_loop",
    "LOG_COLUMNS",
]

log = logging.getLogger(__name__)

# distortion is measured on the 8-bit scale: lambda * 255^2 * MSE
DISTORTION_SCALE = 255.0 ** 2

PAPER_PATCH_SCHEDULE = ((256, 250_000), (320, 100_000), (384, 50_000))

LOG_COLUMNS = ("iter", "patch", "quality", "lr", "loss", "bpp", "psnr", "clean_frac", "grad_norm")


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(TrainingDiverged):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


@dataclass
class TrainConfig:
    profile: str = "tiny"
    lambdas: Tuple[float, ...] = (0.002, 0.006, 0.018, 0.054)
    qualities: Tuple[int, ...] = (0, 1, 2, 3)
    lr0: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patch_schedule: Tuple[Tuple[int, int], ...] = ((32, 300), (48, 100), (64, 100))
    batch_size: int = 8
    seed: int = 0
    policy: Dict = field(default_factory=lambda: {"gaussian_noise": 1.0, "rain": 1.0, "snow": 1.0, "haze": 1.0})
    grad_clip: float = 1.0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if len(self.lambdas) != N_QUALITIES or any(l < 0 for l in self.lambdas):
            raise ValueError(f"need {N_QUALITIES} non-negative lambdas")
        if not self.qualities or any(not 0 <= q < N_QUALITIES for q in self.qualities):
            raise ValueError("qualities must be indices in 0..3")
        for p, n in self.patch_schedule:
            if p % 16 or p <= 0:
                raise ValueError(f"patch size {p} not a positive multiple of 16")
            if n <= 0:
                raise ValueError("schedule iteration counts must be positive")

    @property
    def total_iters(self) -> int:
        return sum(n for _, n in self.patch_schedule)

    def describe(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "policy":
                for k, pv in v.items():
                    lines.append(f"policy.{k} = {_fmt(pv)}")
            elif f.name == "patch_schedule":
                lines.append(f"patch_schedule = " + ", ".join(f"{p}:{n}" for p, n in v))
            else:
                lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def parse_config(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """``key = value`` lines; see :meth:`TrainConfig.describe` for the exact keys."""
    values = {}
    policy = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("policy."):
            policy = {} if policy is None else policy
            k = key[len("policy."):]
            if k == "noise_levels":
                policy[k] = tuple(float(v) for v in value.split(","))
            elif k in KINDS and k != "clean":
                policy[k] = float(value)
            else:
                raise ValueError(f"config line {lineno}: unknown policy key {k!r}")
        elif key == "profile":
            values[key] = value
        elif key in ("lambdas", "betas"):
            values[key] = tuple(float(v) for v in value.split(","))
        elif key == "qualities":
            values[key] = tuple(int(v) for v in value.split(","))
        elif key == "patch_schedule":
            values[key] = tuple(
                (int(p), int(n)) for p, n in (item.split(":") for item in value.split(","))
            )
        elif key in ("lr0", "eps", "grad_clip"):
            values[key] = float(value)
        elif key in ("batch_size", "seed", "checkpoint_every"):
            values[key] = int(value)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    if policy is not None:
        values["policy"] = policy
    cfg = base or TrainConfig()
    merged = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    merged.update(values)
    return TrainConfig(**merged)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# loss, optimizer, schedules


def rd_loss(x_hat, x_gt, bits_y, bits_z, lambda_d: float):
    """``lambda_d * 255^2 * MSE + (bits_y + bits_z) / pixels``.

    Pixels are counted per image plane (N * H * W) so the rate term is in
    bits per pixel.
    """
    if x_hat.shape != x_gt.shape:
        raise T.ShapeError("rd_loss", "reconstruction and target differ", x_hat.shape, x_gt.shape)
    n, _, h, w = x_gt.shape
    mse = torch.mean((x_gt - x_hat) ** 2)
    bpp = (bits_y + bits_z) / (n * h * w)
    return lambda_d * DISTORTION_SCALE * mse + bpp


@dataclass
class AdamState:
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params, grads, state: AdamState, t: int, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update of ``params`` (name -> tensor)."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = betas
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(name)
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise T.ShapeError("adam_step", f"gradient shape for {name!r}", p.shape, g.shape)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


def cosine_lr(t: float, total: float, lr0: float) -> float:
    if total <= 0:
        raise ValueError("schedule length must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr0 * (1 + math.cos(math.pi * t / total)) / 2


def progressive_schedule(it: int, schedule: Sequence[Tuple[int, int]]) -> int:
    """Patch size at 0-based iteration ``it``.

    Stage k spans ``[start_k, start_k + n_k)``; an iteration sitting on a
    boundary therefore belongs to the later (larger-patch) stage.
    """
    if it < 0:
        raise ValueError("iteration must be non-negative")
    end = 0
    for patch, n in schedule:
        end += n
        if it < end:
            return patch
    raise ValueError(f"iteration {it} beyond the {end}-iteration budget")


@torch.no_grad()
def clip_grad_norm(grads: Dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    model_hash: int
    rows: List[dict]


def _make_batch(corpus, patch, cfg: TrainConfig, rng: np.random.Generator):
    degraded, clean, n_clean = [], [], 0
    for _ in range(cfg.batch_size):
        img = corpus[int(rng.integers(len(corpus)))]
        crop = random_crop(img, patch, rng)
        spec = sample_degradation(cfg.policy, rng)
        d, c = apply_degradation(crop, spec)
        n_clean += spec.kind == "clean"
        degraded.append(d)
        clean.append(c)
    to_t = lambda xs: torch.from_numpy(np.stack(xs).astype(np.float32))
    return to_t(degraded), to_t(clean), n_clean / cfg.batch_size


def train_loop(cfg: TrainConfig, corpus, out_dir, model: Optional[AIOCodec] = None,
               progress_every: int = 0) -> TrainResult:
    """Train from scratch (or from ``model``) and write ``model.ckpt`` and ``train_log.csv``.

    Every iteration: crop, degrade, forward, RD loss against the clean crop,
    backward, clip, Adam with cosine-annealed rate. Checkpoints are written
    only from finite states, so the file on disk is always the last good one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    if model is None:
        model = AIOCodec(cfg.profile)
    model.train()
    params = dict(model.named_parameters())
    state = AdamState()
    ckpt_path = out_dir / "model.ckpt"
    log_path = out_dir / "train_log.csv"
    extra = {"profile": cfg.profile, "seed": cfg.seed}
    total = cfg.total_iters
    rows: List[dict] = []
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
    writer.writeheader()
    started = time.time()
    h = save_checkpoint(model, ckpt_path, extra | {"iter": 0})

    for it in range(total):
        rng = np.random.default_rng([cfg.seed, it])
        patch = progressive_schedule(it, cfg.patch_schedule)
        quality = int(cfg.qualities[int(rng.integers(len(cfg.qualities)))])
        x_deg, x_gt, clean_frac = _make_batch(corpus, patch, cfg, rng)
        gen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
        y_side = patch // model.arch.downsampling
        z_side = -(-y_side // 4)
        noise = torch.rand((cfg.batch_size, model.arch.hyper_channels, z_side, z_side), generator=gen) - 0.5

        tape = T.Tape(params)
        try:
            out = model(x_deg, quality, noise=noise)
        except T.NonFiniteError as e:
            raise TrainingDiverged(f"{e} at iteration {it}; last good checkpoint kept") from e
        loss = rd_loss(out["x_hat"], x_gt, out["bits_y"], out["bits_z"], cfg.lambdas[quality])
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss.item()} at iteration {it}; last good checkpoint kept")
        grads = T.backward(tape, loss)
        gnorm = clip_grad_norm(grads, cfg.grad_clip)
        lr = cosine_lr(it, total, cfg.lr0)
        adam_step(params, grads, state, it + 1, lr, cfg.betas, cfg.eps)

        with torch.no_grad():
            n_pix = x_gt.shape[0] * patch * patch
            bpp = float((out["bits_y"] + out["bits_z"]) / n_pix)
            mse = float(torch.mean((out["x_hat"].clamp(0, 1) - x_gt) ** 2))
        row = {
            "iter": it, "patch": patch, "quality": quality, "lr": repr(lr),
            "loss": repr(float(loss.detach())), "bpp": repr(bpp),
            "psnr": repr(10 * math.log10(1 / max(mse, 1e-10))),
            "clean_frac": repr(clean_frac), "grad_norm": repr(gnorm),
        }
        writer.writerow(row)
        rows.append(row)
        if progress_every and (it + 1) % progress_every == 0:
            recent = [float(r["loss"]) for r in rows[-progress_every:]]
            log.info("iter %d/%d patch %d loss %.4f (%.0fs)", it + 1, total, patch,
                     float(np.mean(recent)), time.time() - started)
        if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == total:
            h = save_checkpoint(model, ckpt_path, extra | {"iter": it + 1})
            atomic_write(log_path, buf.getvalue().encode())
    model.eval()
    return TrainResult(ckpt_path, log_path, h, rows)
