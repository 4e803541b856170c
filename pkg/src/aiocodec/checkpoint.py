"""Checkpoint files: named float32 tensors plus the architecture config.

Layout (little-endian)::

    magic        4   b"AIOC"
    version      u16 (1)
    config_len   u32
    config       config_len bytes, UTF-8 JSON, sorted keys
    n_tensors    u32
    n_tensors x:
        name_len u16, name (UTF-8), ndim u8, dims u32 * ndim,
        data     float32 * prod(dims)
    model_hash   u32  CRC-32 of every preceding byte

The model hash doubles as the config hash: it is recomputed on load and
written into every bitstream the model produces.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np
import torch

from .network import CodecArchitecture

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "model_hash", "atomic_write"]

MAGIC = b"AIOC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _serialize(model, extra=None) -> bytes:
    config = {"architecture": model.arch.to_dict(), "extra": extra or {}}
    cfg = json.dumps(config, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(cfg)))
    buf.write(cfg)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        raw = name.encode()
        arr = t.detach().cpu().to(torch.float32).numpy()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def model_hash(model) -> int:
    blob = _serialize(model)
    return struct.unpack("<I", blob[-4:])[0]


def save_checkpoint(model, path, extra=None) -> int:
    """Write ``model`` to ``path`` atomically; returns the model hash."""
    blob = _serialize(model, extra)
    atomic_write(path, blob)
    return struct.unpack("<I", blob[-4:])[0]


def load_checkpoint(path_or_bytes):
    """Returns ``(model, model_hash, extra)``; raises :class:`CheckpointError`."""
    from .model import AIOCodec

    if isinstance(path_or_bytes, (bytes, bytearray)):
        blob = bytes(path_or_bytes)
    else:
        try:
            blob = Path(path_or_bytes).read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint: {e}") from e
    if len(blob) < 14 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != stored:
        raise CheckpointError(f"config hash mismatch: stored {stored:08x}, computed {zlib.crc32(body):08x}")
    version, cfg_len = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    config = json.loads(body[pos:pos + cfg_len])
    pos += cfg_len
    arch = CodecArchitecture.from_dict(config["architecture"])
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    state = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        count = math.prod(dims)
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    model = AIOCodec(arch)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"tensor table does not match architecture: {e}") from e
    model.eval()
    return model, stored, config.get("extra", {})
