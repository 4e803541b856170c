"""Image files. Binary PPM (P6, maxval 255) is always available; PNG needs Pillow.

Arrays are float32 (3, H, W) in [0, 1]; writing rounds to 8 bits.
"""

from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write

__all__ = ["ImageReadError", "read_image", "write_image", "encode_ppm", "decode_ppm", "to_uint8"]

_PPM_HEADER = re.compile(rb"\AP6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


class ImageReadError(ValueError):
    pass


def to_uint8(x) -> np.ndarray:
    """(3, H, W) floats -> (H, W, 3) uint8 with round-half-up."""
    x = np.asarray(x, dtype=np.float64)
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def _from_uint8(a: np.ndarray) -> np.ndarray:
    return (a.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def encode_ppm(x) -> bytes:
    a = to_uint8(x)
    h, w, _ = a.shape
    return b"P6\n%d %d\n255\n" % (w, h) + a.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    m = _PPM_HEADER.match(data)
    if not m:
        raise ImageReadError("not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ImageReadError(f"only 8-bit PPM supported (maxval {maxval})")
    body = data[m.end():]
    if len(body) < w * h * 3:
        raise ImageReadError("PPM pixel data truncated")
    a = np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return _from_uint8(a)


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ImageReadError(f"cannot read {path}: {e}") from e
    if data[:2] == b"P6":
        return decode_ppm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError as e:  # pragma: no cover
            raise ImageReadError("PNG input needs Pillow") from e
        img = Image.open(io.BytesIO(data)).convert("RGB")
        return _from_uint8(np.asarray(img))
    raise ImageReadError(f"{path}: unsupported image format")


def write_image(path, x) -> None:
    """Write atomically; format from the suffix (.ppm or .png)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(to_uint8(x)).save(buf, format="PNG")
        atomic_write(path, buf.getvalue())
    else:
        atomic_write(path, encode_ppm(x))
