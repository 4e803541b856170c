"""32-bit range coder over quantized Gaussian CDF tables.

Symbols are integers ``k`` (the index of ``y_hat / q_step``). Each symbol is
coded against its own table covering ``[s_min, s_max]`` plus a trailing
escape interval; an out-of-support symbol is coded as the escape followed by
its signed 16-bit offset from the table centre, sent raw.

The coder keeps ``low`` in 64 bits with a pending-carry byte cache and
renormalizes a byte at a time whenever ``range < 2**24``. Frequencies are
16-bit. Only integer arithmetic is used between tables and bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

__all__ = [
    "PRECISION",
    "TOTAL",
    "MAX_HALF_WIDTH",
    "TAIL_SIGMAS",
    "DecodeError",
    "CdfTable",
    "TableSet",
    "build_cdf",
    "build_cdfs",
    "pack_tables",
    "encode_symbols",
    "decode_symbols",
    "decode_prefix",
    "analytic_bits",
]

PRECISION = 16
TOTAL = 1 << PRECISION
MAX_HALF_WIDTH = 255
TAIL_SIGMAS = 8.0
RAW_BITS = 16

# float32 rounding of the 1e-4 clamp lands just below the float64 literal
_SIGMA_FLOOR = 1e-4 * (1 - 1e-6)

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class DecodeError(ValueError):
    """Payload is truncated, corrupted or inconsistent with its tables."""


@dataclass(frozen=True)
class CdfTable:
    """One quantized CDF.

    ``cdf`` has ``n + 2`` entries for ``n = s_max - s_min + 1`` in-support
    symbols; the interval ``[cdf[n], cdf[n + 1])`` is the escape.
    """

    s_min: int
    s_max: int
    cdf: np.ndarray
    precision: int = PRECISION

    @property
    def escape_index(self) -> int:
        return self.s_max - self.s_min + 1

    @property
    def center(self) -> int:
        return (self.s_min + self.s_max) // 2


@dataclass
class TableSet:
    """Many tables packed flat for the compiled coder; ``index[i]`` selects symbol i's table."""

    cdf: np.ndarray  # uint32, concatenated tables
    offset: np.ndarray  # int64, start of each table in ``cdf``
    s_min: np.ndarray  # int64
    n_in: np.ndarray  # int64, in-support symbol count
    index: np.ndarray  # int64, per-symbol table id

    def __len__(self):
        return len(self.index)

    def table(self, i: int) -> CdfTable:
        t = int(self.index[i])
        n = int(self.n_in[t])
        o = int(self.offset[t])
        s0 = int(self.s_min[t])
        return CdfTable(s0, s0 + n - 1, self.cdf[o:o + n + 2].copy())


# ---------------------------------------------------------------------------
# table construction


@numba.njit(cache=True)
def _phi(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@numba.njit(cache=True)
def _raw_cdf(delta, scale, s_lo, n, out):
    """Unfloored counts: round(TOTAL * P(bin <= k)) relative to the support start.

    Symbol j (0 <= j < n) covers ``[s_lo + j - 1/2, s_lo + j + 1/2)`` in step
    units, Gaussian centred at ``delta`` with std ``scale``.
    """
    base = _phi((s_lo - 0.5 - delta) / scale)
    out[0] = 0
    for k in range(1, n + 1):
        p = _phi((s_lo + k - 0.5 - delta) / scale) - base
        out[k] = np.int64(np.floor(p * TOTAL + 0.5))


@numba.njit(cache=True)
def _finalize(raw, n, out):
    """Floor every interval (n symbols + escape) at 1 and renormalize to TOTAL."""
    freq = np.empty(n + 1, np.int64)
    for k in range(n):
        f = raw[k + 1] - raw[k]
        freq[k] = f if f > 1 else 1
    esc = TOTAL - raw[n]
    freq[n] = esc if esc > 1 else 1
    excess = 0
    for k in range(n + 1):
        excess += freq[k]
    excess -= TOTAL
    while excess > 0:
        j = 0
        for k in range(1, n + 1):
            if freq[k] > freq[j]:
                j = k
        take = freq[j] - 1
        if take > excess:
            take = excess
        freq[j] -= take
        excess -= take
    if excess < 0:
        j = 0
        for k in range(1, n + 1):
            if freq[k] > freq[j]:
                j = k
        freq[j] -= excess
    out[0] = 0
    for k in range(n + 1):
        out[k + 1] = out[k] + freq[k]


@numba.njit(cache=True)
def _half_width(scale):
    w = math.ceil(TAIL_SIGMAS * scale + 1.0)
    if w > MAX_HALF_WIDTH:
        return MAX_HALF_WIDTH
    if w < 1:
        return 1
    return np.int64(w)


@numba.njit(cache=True)
def _build_many(mu, sigma, q):
    m = mu.shape[0]
    centers = np.empty(m, np.int64)
    widths = np.empty(m, np.int64)
    deltas = np.empty(m, np.float64)
    scales = np.empty(m, np.float64)
    total = 0
    for i in range(m):
        ratio = mu[i] / q[i]
        c = np.int64(np.floor(ratio + 0.5))
        centers[i] = c
        deltas[i] = ratio - c
        scales[i] = sigma[i] / q[i]
        widths[i] = _half_width(scales[i])
        total += 2 * widths[i] + 3
    cdf = np.empty(total, np.uint32)
    offset = np.empty(m, np.int64)
    s_min = np.empty(m, np.int64)
    n_in = np.empty(m, np.int64)
    raw = np.empty(2 * MAX_HALF_WIDTH + 2, np.int64)
    fin = np.empty(2 * MAX_HALF_WIDTH + 3, np.int64)
    pos = 0
    for i in range(m):
        w = widths[i]
        n = 2 * w + 1
        _raw_cdf(deltas[i], scales[i], -w, n, raw)
        _finalize(raw, n, fin)
        offset[i] = pos
        s_min[i] = centers[i] - w
        n_in[i] = n
        for k in range(n + 2):
            cdf[pos + k] = fin[k]
        pos += n + 2
    return cdf, offset, s_min, n_in


def build_cdf(mu: float, sigma: float, q_step: float, support=None) -> CdfTable:
    """Quantized CDF of ``N(mu, sigma^2)`` binned on the grid ``k * q_step``.

    ``support=(s_min, s_max)`` fixes the coded range of ``k``; by default it
    is centred on ``round(mu / q_step)`` with a half-width of
    ``ceil(8 * sigma / q_step + 1)`` capped at 255.
    """
    if not sigma >= _SIGMA_FLOOR:
        raise ValueError(f"sigma must be >= 1e-4, got {sigma}")
    if not q_step > 0:
        raise ValueError(f"q_step must be positive, got {q_step}")
    if support is None:
        cdf, _, s_min, n_in = _build_many(
            np.array([mu], np.float64), np.array([sigma], np.float64), np.array([q_step], np.float64)
        )
        return CdfTable(int(s_min[0]), int(s_min[0] + n_in[0] - 1), cdf)
    s_lo, s_hi = int(support[0]), int(support[1])
    if s_hi < s_lo:
        raise ValueError(f"empty support [{s_lo}, {s_hi}]")
    n = s_hi - s_lo + 1
    if n > 2 * MAX_HALF_WIDTH + 1:
        raise ValueError(f"support wider than {2 * MAX_HALF_WIDTH + 1} symbols")
    raw = np.empty(n + 1, np.int64)
    fin = np.empty(n + 2, np.int64)
    _raw_cdf(mu / q_step, sigma / q_step, s_lo, n, raw)
    _finalize(raw, n, fin)
    return CdfTable(s_lo, s_hi, fin.astype(np.uint32))


def raw_cdf(mu: float, sigma: float, q_step: float, support) -> np.ndarray:
    """Counts before frequency flooring (for checking table accuracy)."""
    s_lo, s_hi = int(support[0]), int(support[1])
    n = s_hi - s_lo + 1
    raw = np.empty(n + 1, np.int64)
    _raw_cdf(mu / q_step, sigma / q_step, s_lo, n, raw)
    return raw


def build_cdfs(mu, sigma, q_step) -> TableSet:
    """One table per element of the (broadcast) parameter arrays."""
    mu, sigma, q_step = np.broadcast_arrays(
        np.asarray(mu, np.float64), np.asarray(sigma, np.float64), np.asarray(q_step, np.float64)
    )
    mu, sigma, q_step = (np.ascontiguousarray(a.ravel()) for a in (mu, sigma, q_step))
    if sigma.size and not (sigma >= _SIGMA_FLOOR).all():
        raise ValueError("sigma must be >= 1e-4")
    if q_step.size and not (q_step > 0).all():
        raise ValueError("q_step must be positive")
    cdf, offset, s_min, n_in = _build_many(mu, sigma, q_step)
    return TableSet(cdf, offset, s_min, n_in, np.arange(len(mu), dtype=np.int64))


def pack_tables(tables: Sequence[CdfTable], index=None) -> TableSet:
    """Pack explicit tables; ``index`` maps symbols to tables (default: one each)."""
    offsets, pos = [], 0
    for t in tables:
        if t.precision != PRECISION:
            raise ValueError("only 16-bit tables are supported")
        offsets.append(pos)
        pos += len(t.cdf)
    cdf = np.concatenate([np.asarray(t.cdf, np.uint32) for t in tables]) if tables else np.zeros(0, np.uint32)
    idx = np.arange(len(tables), dtype=np.int64) if index is None else np.asarray(index, np.int64)
    return TableSet(
        cdf,
        np.array(offsets, np.int64),
        np.array([t.s_min for t in tables], np.int64),
        np.array([t.s_max - t.s_min + 1 for t in tables], np.int64),
        idx,
    )


def _as_tableset(cdfs) -> TableSet:
    if isinstance(cdfs, TableSet):
        return cdfs
    if isinstance(cdfs, CdfTable):
        raise TypeError("pass a sequence of tables or a TableSet")
    return pack_tables(list(cdfs))


# ---------------------------------------------------------------------------
# coder kernels

_ERR_TRUNCATED = -1
_ERR_CORRUPT = -2
_ERR_RANGE = -3
_ERR_CARRY = -4


@numba.njit(cache=True)
def _encode(symbols, cdf, offset, s_min, n_in, index, out):
    """Returns bytes written, or a negative error code."""
    low = np.uint64(0)
    rng = np.uint64(_MASK32)
    cache = np.uint64(0)
    cache_size = 1
    pos = 0
    first = True
    n_sym = symbols.shape[0]
    for i in range(n_sym + 5):
        if i < n_sym:
            t = index[i]
            n = n_in[t]
            o = offset[t]
            s = symbols[i] - s_min[t]
            raw = False
            raw_val = np.uint64(0)
            if s < 0 or s >= n:
                c = (s_min[t] + (n - 1) // 2)
                d = symbols[i] - c
                if d < -32768 or d > 32767:
                    return _ERR_RANGE
                raw_val = np.uint64(d & 0xFFFF)
                s = n
                raw = True
            start = np.uint64(cdf[o + s])
            size = np.uint64(cdf[o + s + 1]) - start
            r = rng >> np.uint64(16)
            low += r * start
            rng = r * size
            steps = 1
            if raw:
                steps = 2
            for step in range(steps):
                if step == 1:
                    r = rng >> np.uint64(16)
                    low += r * raw_val
                    rng = r
                while rng < np.uint64(_TOP):
                    rng = rng << np.uint64(8)
                    # shift_low
                    if low < np.uint64(0xFF000000) or low > np.uint64(_MASK32):
                        carry = low >> np.uint64(32)
                        temp = cache
                        while True:
                            if first:
                                first = False
                                if (temp + carry) & np.uint64(0xFF) != 0:
                                    return _ERR_CARRY
                            else:
                                out[pos] = np.uint8((temp + carry) & np.uint64(0xFF))
                                pos += 1
                            temp = np.uint64(0xFF)
                            cache_size -= 1
                            if cache_size == 0:
                                break
                        cache = (low >> np.uint64(24)) & np.uint64(0xFF)
                    cache_size += 1
                    low = (low & np.uint64(0x00FFFFFF)) << np.uint64(8)
        else:
            # flush
            if low < np.uint64(0xFF000000) or low > np.uint64(_MASK32):
                carry = low >> np.uint64(32)
                temp = cache
                while True:
                    if first:
                        first = False
                        if (temp + carry) & np.uint64(0xFF) != 0:
                            return _ERR_CARRY
                    else:
                        out[pos] = np.uint8((temp + carry) & np.uint64(0xFF))
                        pos += 1
                    temp = np.uint64(0xFF)
                    cache_size -= 1
                    if cache_size == 0:
                        break
                cache = (low >> np.uint64(24)) & np.uint64(0xFF)
            cache_size += 1
            low = (low & np.uint64(0x00FFFFFF)) << np.uint64(8)
    return pos


@numba.njit(cache=True)
def _decode(data, n_sym, cdf, offset, s_min, n_in, index, out, check_end):
    """Returns 0 on success, or a negative error code."""
    size_in = data.shape[0]
    pos = 0
    code = np.uint64(0)
    rng = np.uint64(_MASK32)
    for _ in range(4):
        if pos >= size_in:
            return _ERR_TRUNCATED
        code = (code << np.uint64(8)) | np.uint64(data[pos])
        pos += 1
    for i in range(n_sym):
        t = index[i]
        n = n_in[t]
        o = offset[t]
        r = rng >> np.uint64(16)
        v = code // r
        if v >= np.uint64(TOTAL):
            return _ERR_CORRUPT
        # largest s with cdf[s] <= v
        lo = 0
        hi = n + 1
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if np.uint64(cdf[o + mid]) <= v:
                lo = mid
            else:
                hi = mid
        start = np.uint64(cdf[o + lo])
        size = np.uint64(cdf[o + lo + 1]) - start
        code -= r * start
        rng = r * size
        steps = 1
        if lo == n:
            steps = 2
        for step in range(steps):
            if step == 1:
                r = rng >> np.uint64(16)
                v = code // r
                if v >= np.uint64(TOTAL):
                    return _ERR_CORRUPT
                code -= r * v
                rng = r
                d = np.int64(v)
                if d >= 32768:
                    d -= 65536
                out[i] = s_min[t] + (n - 1) // 2 + d
            while rng < np.uint64(_TOP):
                if pos >= size_in:
                    return _ERR_TRUNCATED
                code = ((code << np.uint64(8)) | np.uint64(data[pos])) & np.uint64(_MASK32)
                rng = rng << np.uint64(8)
                pos += 1
        if lo < n:
            out[i] = s_min[t] + lo
    if check_end and pos != size_in:
        return _ERR_CORRUPT
    return 0


def encode_symbols(symbols, cdfs) -> bytes:
    """Range-code ``symbols`` with one table per symbol.

    ``cdfs`` is a :class:`TableSet` or a sequence of :class:`CdfTable`.
    An empty sequence codes to an empty payload.
    """
    symbols = np.ascontiguousarray(symbols, dtype=np.int64).ravel()
    ts = _as_tableset(cdfs)
    if len(ts) != len(symbols):
        raise ValueError(f"{len(symbols)} symbols but {len(ts)} tables")
    if len(symbols) == 0:
        return b""
    # worst case: 16 + 16 bits per symbol plus flush
    out = np.empty(4 * len(symbols) + 16, np.uint8)
    n = _encode(symbols, ts.cdf, ts.offset, ts.s_min, ts.n_in, ts.index, out)
    if n == _ERR_RANGE:
        raise ValueError("escaped symbol offset does not fit in 16 bits")
    if n < 0:
        raise RuntimeError("range coder invariant violated (carry into dropped lead byte)")
    return out[:n].tobytes()


def decode_symbols(data: bytes, cdfs, n: int) -> np.ndarray:
    """Inverse of :func:`encode_symbols`; raises :class:`DecodeError` on bad input."""
    ts = _as_tableset(cdfs)
    if len(ts) != n:
        raise ValueError(f"asked for {n} symbols but {len(ts)} tables given")
    if n == 0:
        if len(data):
            raise DecodeError("non-empty payload for zero symbols")
        return np.zeros(0, np.int64)
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    out = np.empty(n, np.int64)
    _check(_decode(buf, n, ts.cdf, ts.offset, ts.s_min, ts.n_in, ts.index, out, True))
    return out


def decode_prefix(data: bytes, cdfs) -> np.ndarray:
    """Decode only the first ``len(cdfs)`` symbols of a longer payload."""
    ts = _as_tableset(cdfs)
    n = len(ts)
    if n == 0:
        return np.zeros(0, np.int64)
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    out = np.empty(n, np.int64)
    _check(_decode(buf, n, ts.cdf, ts.offset, ts.s_min, ts.n_in, ts.index, out, False))
    return out


def _check(status):
    if status == _ERR_TRUNCATED:
        raise DecodeError("payload truncated")
    if status != 0:
        raise DecodeError("payload corrupted")


def analytic_bits(symbols, cdfs) -> float:
    """Ideal code length of ``symbols`` under the same quantized tables."""
    symbols = np.asarray(symbols, np.int64).ravel()
    ts = _as_tableset(cdfs)
    t = ts.index
    rel = symbols - ts.s_min[t]
    n = ts.n_in[t]
    escaped = (rel < 0) | (rel >= n)
    k = np.where(escaped, n, rel)
    o = ts.offset[t]
    freq = ts.cdf[o + k + 1].astype(np.int64) - ts.cdf[o + k].astype(np.int64)
    return float(np.sum(PRECISION - np.log2(freq)) + RAW_BITS * escaped.sum())
