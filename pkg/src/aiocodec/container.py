"""Compressed-file container.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"AIO1"
    4       1     version (1)
    5       1     quality index (0..3)
    6       4     model hash (u32)
    10      2     width  (pre-pad)
    12      2     height (pre-pad)
    14      1     pad_h
    15      1     pad_w
    16      4     z payload length
    20      ..    z payload
    ..      4     y payload length
    ..      ..    y payload
    ..      4     CRC-32 of every preceding byte

The y length must account for every byte up to the checksum. The range
coder carries no redundancy, so the checksum is what turns a flipped
payload bit into an error instead of a silently different image.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

__all__ = ["MAGIC", "VERSION", "HEADER_SIZE", "ContainerError", "ContainerMeta", "write_container", "read_container"]

MAGIC = b"AIO1"
VERSION = 1
N_QUALITIES = 4
MAX_PAD = 15

_HEADER = struct.Struct("<4sBBIHHBBI")
_LEN = struct.Struct("<I")
HEADER_SIZE = _HEADER.size


class ContainerError(ValueError):
    """Malformed or mismatched container; ``field`` names the offending part."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass(frozen=True)
class ContainerMeta:
    quality: int
    model_hash: int
    width: int
    height: int
    pad_h: int
    pad_w: int
    version: int = VERSION

    def validate(self) -> None:
        if self.version != VERSION:
            raise ContainerError("version", f"unsupported version {self.version}")
        if not 0 <= self.quality < N_QUALITIES:
            raise ContainerError("quality", f"quality index {self.quality} outside 0..{N_QUALITIES - 1}")
        if not (0 < self.width <= 0xFFFF and 0 < self.height <= 0xFFFF):
            raise ContainerError("dims", f"bad dimensions {self.width}x{self.height}")
        if not (0 <= self.pad_h <= MAX_PAD and 0 <= self.pad_w <= MAX_PAD):
            raise ContainerError("padding", f"bad padding ({self.pad_h}, {self.pad_w})")
        if not 0 <= self.model_hash <= 0xFFFFFFFF:
            raise ContainerError("model_hash", "hash must fit in 32 bits")


def write_container(meta: ContainerMeta, z_bytes: bytes, y_bytes: bytes) -> bytes:
    meta.validate()
    head = _HEADER.pack(
        MAGIC, meta.version, meta.quality, meta.model_hash,
        meta.width, meta.height, meta.pad_h, meta.pad_w, len(z_bytes),
    )
    body = b"".join([head, bytes(z_bytes), _LEN.pack(len(y_bytes)), bytes(y_bytes)])
    return body + _LEN.pack(zlib.crc32(body))


def read_container(data: bytes, expected_hash: int | None = None):
    """Parse and validate; returns ``(meta, z_bytes, y_bytes)``.

    Checks run in order: magic, length, checksum, header fields, model hash.
    """
    data = bytes(data)
    if len(data) >= 4 and data[:4] != MAGIC:
        raise ContainerError("magic", f"expected {MAGIC!r}, found {data[:4]!r}")
    if len(data) < HEADER_SIZE + 2 * _LEN.size:
        raise ContainerError("length", f"file shorter than the {HEADER_SIZE + 2 * _LEN.size}-byte minimum")
    body, (crc,) = data[:-_LEN.size], _LEN.unpack(data[-_LEN.size:])
    if zlib.crc32(body) != crc:
        raise ContainerError("checksum", "CRC-32 mismatch (corrupted or truncated file)")
    magic, version, quality, model_hash, width, height, pad_h, pad_w, z_len = _HEADER.unpack_from(body)
    meta = ContainerMeta(quality, model_hash, width, height, pad_h, pad_w, version)
    meta.validate()
    pos = HEADER_SIZE
    if pos + z_len + _LEN.size > len(body):
        raise ContainerError("length", "z payload runs past end of file")
    z_bytes = body[pos:pos + z_len]
    pos += z_len
    (y_len,) = _LEN.unpack_from(body, pos)
    pos += _LEN.size
    if pos + y_len != len(body):
        raise ContainerError("length", f"y payload length {y_len} does not match the {len(body) - pos} bytes present")
    if expected_hash is not None and model_hash != expected_hash:
        raise ContainerError("model_hash", f"stream made by model {model_hash:08x}, loaded model is {expected_hash:08x}")
    return meta, z_bytes, body[pos:]
