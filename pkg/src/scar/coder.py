"""Range coder driven by externally supplied 16-bit frequency tables.

The coder keeps a 32-bit range and a 33-bit low with byte-wise carry
propagation (the cache/carry scheme used by LZMA). Sub-intervals are split as
``floor(range * cdf / 2^16)`` rather than ``(range >> 16) * cdf``, which keeps
the rounding loss per symbol near 2^-24 instead of 2^-8.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import IntegrityError, ParameterError

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


@dataclass(frozen=True)
class QuantizedCdf:
    cdf: np.ndarray  # K + 1 cumulative frequencies, cdf[0] = 0, cdf[K] = 2^16

    def __post_init__(self):
        c = np.asarray(self.cdf, dtype=np.int64)
        if c.ndim != 1 or len(c) < 2 or c[0] != 0 or c[-1] != TOTAL or np.any(np.diff(c) < 1):
            raise ParameterError("cdf must start at 0, end at 2^16 and be strictly increasing")
        object.__setattr__(self, "cdf", c)

    @property
    def freqs(self) -> np.ndarray:
        return np.diff(self.cdf)

    @property
    def size(self) -> int:
        return len(self.cdf) - 1

    def bits(self, symbol: int) -> float:
        return -np.log2((self.cdf[symbol + 1] - self.cdf[symbol]) / TOTAL)


def quantize_freqs(probs) -> np.ndarray:
    """Integer frequencies (B, K) summing to 2^16 per row, every entry >= 1.

    Rounding is floor plus a largest-remainder repair; ties go to the lower
    symbol index.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if not np.all(np.isfinite(p)):
        raise ParameterError("probabilities must be finite")
    if np.any(p < 0):
        raise ParameterError("probabilities must be non-negative")
    B, K = p.shape
    if K > TOTAL:
        raise ParameterError("alphabet larger than the frequency total")
    sums = p.sum(axis=1, keepdims=True)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ParameterError("probabilities must sum to 1 within 1e-6")
    scaled = p / sums * TOTAL
    f = np.floor(scaled).astype(np.int64)
    rem = scaled - f
    f = np.maximum(f, 1)
    deficit = TOTAL - f.sum(axis=1)
    rank = np.empty_like(f)
    rows = np.arange(B)[:, None]
    if np.any(deficit > 0):
        order = np.argsort(-rem, axis=1, kind="stable")
        rank[rows, order] = np.arange(K)[None, :]
        f += (rank < np.maximum(deficit, 0)[:, None])
    deficit = TOTAL - f.sum(axis=1)
    while np.any(deficit < 0):
        # take from entries that can spare one, smallest remainder first
        key = np.where(f > 1, rem, np.inf)
        order = np.argsort(key, axis=1, kind="stable")
        rank[rows, order] = np.arange(K)[None, :]
        take = (rank < np.maximum(-deficit, 0)[:, None]) & (f > 1)
        f -= take
        deficit = TOTAL - f.sum(axis=1)
    return f


def quantize_cdf(probs) -> QuantizedCdf:
    f = quantize_freqs(probs)[0]
    return QuantizedCdf(np.concatenate([[0], np.cumsum(f)]))


def quantize_cdfs(probs) -> np.ndarray:
    """Batched form: (B, K + 1) cumulative tables."""
    f = quantize_freqs(probs)
    return np.concatenate([np.zeros((len(f), 1), np.int64), np.cumsum(f, axis=1)], axis=1)


def _as_cdf(c) -> np.ndarray:
    return c.cdf if isinstance(c, QuantizedCdf) else np.asarray(c, dtype=np.int64)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self.count = 0

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, symbol: int, cdf) -> None:
        c = _as_cdf(cdf)
        if not 0 <= symbol < len(c) - 1 or c[symbol + 1] <= c[symbol]:
            raise ParameterError(f"symbol {symbol} has zero frequency or is out of range")
        lo, hi = int(c[symbol]), int(c[symbol + 1])
        start = (self.range * lo) >> PRECISION
        self.low += start
        self.range = ((self.range * hi) >> PRECISION) - start
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()
        self.count += 1

    def finish(self) -> bytes:
        if self.count == 0:
            return b""
        for _ in range(5):
            self._shift_low()
        # the first emitted byte is the initial cache and is always zero
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        self._started = False

    def _next(self) -> int:
        if self.pos >= len(self.data):
            raise IntegrityError("range-coded stream is truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _start(self):
        for _ in range(4):
            self.code = (self.code << 8) | self._next()
        self._started = True

    def decode(self, cdf) -> int:
        if not self._started:
            self._start()
        c = _as_cdf(cdf)
        # largest s with floor(range * cdf[s] / 2^16) <= code
        v = ((self.code + 1) * TOTAL - 1) // self.range
        if v >= TOTAL:
            raise IntegrityError("range-coded stream is corrupt")
        s = int(np.searchsorted(c, v, side="right")) - 1
        lo, hi = int(c[s]), int(c[s + 1])
        start = (self.range * lo) >> PRECISION
        self.code -= start
        self.range = ((self.range * hi) >> PRECISION) - start
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next()) & _MASK32
            self.range <<= 8
        return s

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.data)


def encode_stream(symbols, cdfs) -> bytes:
    """Code ``symbols[i]`` under ``cdfs[i]`` (QuantizedCdf or cumulative array)."""
    enc = RangeEncoder()
    for s, c in zip(symbols, cdfs, strict=True):
        enc.encode(int(s), c)
    return enc.finish()


def decode_stream(data: bytes, cdf_provider, count: int) -> list:
    """Decode ``count`` symbols; ``cdf_provider(i, decoded_prefix)`` returns the
    table for symbol ``i``, so it may depend causally on earlier symbols."""
    dec = RangeDecoder(data)
    out = []
    for i in range(count):
        out.append(dec.decode(cdf_provider(i, out)))
    return out


def ideal_bits(symbols, cdfs) -> float:
    """Sum of -log2 of the quantized probabilities of ``symbols``."""
    total = 0.0
    for s, c in zip(symbols, cdfs, strict=True):
        c = _as_cdf(c)
        total -= np.log2((c[s + 1] - c[s]) / TOTAL)
    return total
