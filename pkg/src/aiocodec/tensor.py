"""Dense tensor kernels with reverse-mode differentiation.

Tensors are plain ``torch.Tensor`` objects in NCHW layout; torch's autograd
records the graph. This module adds the pieces the codec relies on: checked
kernels with structured shape errors, channel-wise layer norm, a
max-subtracted softmax that refuses NaN input, both directions of pixel
shuffle, a single-use :class:`Tape` wrapper for collecting gradients of
named leaves, and a multiply-accumulate counter used for complexity checks.
"""

from __future__ import annotations

import contextlib
import math
from typing import Dict, Iterable, Iterator, Mapping, Optional, Tuple

import torch
import torch.nn.functional as F

__all__ = [
    "ShapeError",
    "TapeError",
    "NonFiniteError",
    "Tape",
    "MacCounter",
    "count_macs",
    "conv2d",
    "matmul",
    "pixel_shuffle",
    "softmax",
    "layer_norm",
    "gelu",
    "backward",
    "set_default_precision",
]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""

    def __init__(self, op: str, message: str, *shapes: Tuple[int, ...]):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: {message} [{detail}]" if shapes else f"{op}: {message}")


class NonFiniteError(ValueError):
    """NaN reached a kernel that cannot produce a meaningful result from it."""


class TapeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# MAC accounting


class MacCounter:
    def __init__(self) -> None:
        self.total = 0
        self.by_op: Dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


_active_counters: list = []


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates issued by :func:`conv2d` and :func:`matmul`.

    Elementwise work (norms, activations, softmax) is not counted.
    """
    counter = MacCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _record(op: str, n: int) -> None:
    for c in _active_counters:
        c.add(op, n)


# ---------------------------------------------------------------------------
# kernels


def conv2d(
    input: torch.Tensor,
    kernel: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    pad=0,
    groups: int = 1,
) -> torch.Tensor:
    """2-D cross-correlation on an NCHW tensor.

    ``pad`` is an int or an ``(pad_h, pad_w)`` pair; padding is zeros.
    Output extent per axis is ``(H + 2*pad - k) // stride + 1``.
    """
    if input.dim() != 4 or kernel.dim() != 4:
        raise ShapeError("conv2d", "expected 4-D input and kernel", input.shape, kernel.shape)
    n, c, h, w = input.shape
    c_out, c_in_g, kh, kw = kernel.shape
    if groups < 1 or c % groups or c_out % groups:
        raise ShapeError("conv2d", f"channels not divisible by groups={groups}", input.shape, kernel.shape)
    if c_in_g != c // groups:
        raise ShapeError("conv2d", "kernel in-channels != input channels / groups", input.shape, kernel.shape)
    if bias is not None and tuple(bias.shape) != (c_out,):
        raise ShapeError("conv2d", "bias must have one entry per output channel", bias.shape, kernel.shape)
    ph, pw = (pad, pad) if isinstance(pad, int) else pad
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", "kernel larger than padded input", input.shape, kernel.shape)
    if _active_counters:
        _record("conv2d", n * c_out * oh * ow * c_in_g * kh * kw)
    return F.conv2d(input, kernel, bias, stride=stride, padding=(ph, pw), groups=groups)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product over the last two axes (no broadcasting)."""
    if a.dim() < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "incompatible operands", a.shape, b.shape)
    if _active_counters:
        _record("matmul", math.prod(a.shape) * b.shape[-1])
    return a @ b


def pixel_shuffle(input: torch.Tensor, r: int, direction: str = "up") -> torch.Tensor:
    """Sub-pixel rearrangement.

    ``up``:   (N, C*r*r, H, W) -> (N, C, H*r, W*r), with
              ``out[n, c, h*r + i, w*r + j] = in[n, c*r*r + i*r + j, h, w]``.
    ``down``: the exact inverse.
    """
    if input.dim() != 4:
        raise ShapeError("pixel_shuffle", "expected 4-D input", input.shape)
    if r < 1:
        raise ValueError(f"pixel_shuffle: factor must be >= 1, got {r}")
    n, c, h, w = input.shape
    if direction == "up":
        if c % (r * r):
            raise ShapeError("pixel_shuffle", f"channels not divisible by r^2={r * r}", input.shape)
        return F.pixel_shuffle(input, r)
    if direction == "down":
        if h % r or w % r:
            raise ShapeError("pixel_shuffle", f"spatial extents not divisible by r={r}", input.shape)
        return F.pixel_unshuffle(input, r)
    raise ValueError(f"pixel_shuffle: direction must be 'up' or 'down', got {direction!r}")


def softmax(input: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if torch.isnan(input).any():
        raise NonFiniteError("softmax: NaN in input")
    shifted = input - input.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(
    input: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-6
) -> torch.Tensor:
    """Normalize over the channel axis independently at every (n, h, w)."""
    if input.dim() != 4:
        raise ShapeError("layer_norm", "expected NCHW input", input.shape)
    c = input.shape[1]
    if tuple(gamma.shape) != (c,) or tuple(beta.shape) != (c,):
        raise ShapeError("layer_norm", "affine params must be (C,)", input.shape, gamma.shape, beta.shape)
    mu = input.mean(dim=1, keepdim=True)
    centered = input - mu
    var = (centered * centered).mean(dim=1, keepdim=True)
    normed = centered / torch.sqrt(var + eps)
    return normed * gamma.view(1, c, 1, 1) + beta.view(1, c, 1, 1)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


# ---------------------------------------------------------------------------
# gradient collection


class Tape:
    """Registry of differentiable leaves for one backward pass.

    The graph itself is recorded by torch as operations execute; the tape
    only names the leaves whose gradients are wanted and enforces the
    single-use contract.
    """

    def __init__(self, leaves: Optional[Mapping[str, torch.Tensor] | Iterable] = None):
        self.leaves: Dict[str, torch.Tensor] = {}
        self.consumed = False
        if leaves is not None:
            items = leaves.items() if isinstance(leaves, Mapping) else leaves
            for name, t in items:
                self.watch(name, t)

    def watch(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if not tensor.requires_grad:
            raise TapeError(f"leaf {name!r} does not require grad")
        if name in self.leaves:
            raise TapeError(f"leaf {name!r} registered twice")
        self.leaves[name] = tensor
        return tensor


def backward(tape: Tape, loss: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Return ``{name: d loss / d leaf}`` for every leaf on ``tape``.

    Leaves the loss does not depend on get zero gradients. A tape can be
    used exactly once.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward call")
    if loss.numel() != 1:
        raise ShapeError("backward", "loss must be a scalar", loss.shape)
    tape.consumed = True
    names = list(tape.leaves)
    tensors = [tape.leaves[k] for k in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {
        k: (g if g is not None else torch.zeros_like(t))
        for k, t, g in zip(names, tensors, grads)
    }


def set_default_precision(bits: int) -> None:
    """Select float32 (production) or float64 (gradient checks)."""
    if bits == 32:
        torch.set_default_dtype(torch.float32)
    elif bits == 64:
        torch.set_default_dtype(torch.float64)
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
