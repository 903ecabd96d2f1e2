"""Lossless range coder over quantized CDFs, plus the differentiable bit-cost model.

The coder is deterministic and platform independent: all state arithmetic is
exact integer math on 48-bit quantities (so the same algorithm can be mirrored
bit-exactly in environments limited to 53-bit exact integers), renormalizing
16 bits at a time, big-endian on the wire. Carries are propagated into the
already-emitted chunks, so no range is ever wasted on straddle trimming; the
total overhead is the 16-bit flush plus a per-symbol truncation loss bounded
by total/(range*ln2) <= 2^-16/ln2 bits at the default 16-bit CDF precision.
"""

from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

STATE_BITS = 48
RENORM_BITS = 16
_MASK = (1 << STATE_BITS) - 1
_BOTTOM = 1 << (STATE_BITS - RENORM_BITS)  # renormalize below this
_CHUNK_MASK = (1 << RENORM_BITS) - 1

DEFAULT_CDF_PRECISION = 16
MIN_CDF_PRECISION = 2
MAX_CDF_PRECISION = 24

SCALE_FLOOR = 0.11
BITS_CAP = 50.0

# Coded symbols are round(value - mean) clamped to this window (offset -127).
SYMBOL_MIN = -127
SYMBOL_MAX = 128


class EntropyCoderError(Exception):
    """Invalid coding request (bad CDF, symbol out of alphabet, ...)."""


class CorruptPayloadError(EntropyCoderError):
    """Payload failed decoding: truncation, garbage, or CDF mismatch."""


@dataclass(eq=False)
class QuantizedCdf:
    """Integer CDF with total mass exactly 2**precision.

    ``cdf`` has alphabet_size + 1 entries, starts at 0 and ends at
    2**precision. ``offset`` maps symbol index i to the signed value
    i + offset.
    """

    cdf: np.ndarray
    precision: int = DEFAULT_CDF_PRECISION
    offset: int = 0
    _cdf_list: list = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        self.cdf = np.asarray(self.cdf, dtype=np.int64)
        if self.cdf.ndim != 1 or self.cdf.size < 2:
            raise EntropyCoderError("cdf needs at least two entries")
        if not (MIN_CDF_PRECISION <= self.precision <= MAX_CDF_PRECISION):
            raise EntropyCoderError(f"precision {self.precision} out of range")
        if self.cdf[0] != 0 or self.cdf[-1] != (1 << self.precision):
            raise EntropyCoderError("cdf must start at 0 and end at 2**precision")
        if np.any(np.diff(self.cdf) < 0):
            raise EntropyCoderError("cdf must be non-decreasing")
        # plain list is faster for bisect / per-symbol indexing than ndarray
        self._cdf_list = [int(v) for v in self.cdf]

    @property
    def alphabet_size(self) -> int:
        return len(self._cdf_list) - 1

    def width(self, symbol: int) -> int:
        return self._cdf_list[symbol + 1] - self._cdf_list[symbol]


def quantize_pmf(pmf, precision: int = DEFAULT_CDF_PRECISION, offset: int = 0) -> QuantizedCdf:
    """Round a probability vector to integer counts summing to 2**precision.

    Every symbol with nonzero probability receives at least one count; the
    rounding remainder is assigned to the largest-mass symbol (ties go to the
    lowest index).
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or pmf.size == 0:
        raise EntropyCoderError("pmf must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(pmf)) or np.any(pmf < 0):
        raise EntropyCoderError("pmf entries must be finite and >= 0")
    total_mass = pmf.sum()
    if total_mass <= 0:
        raise EntropyCoderError("pmf must have positive total mass")
    if not (MIN_CDF_PRECISION <= precision <= MAX_CDF_PRECISION):
        raise EntropyCoderError(f"precision {precision} out of range")

    total = 1 << precision
    if int((pmf > 0).sum()) > total:
        raise EntropyCoderError(f"alphabet of size {pmf.size} does not fit in {precision} bits")
    target = pmf * (total / total_mass)
    counts = np.floor(target + 0.5).astype(np.int64)
    counts[(pmf > 0) & (counts == 0)] = 1
    remainder = total - int(counts.sum())
    if remainder > 0:
        counts[int(np.argmax(pmf))] += remainder
    elif remainder < 0:
        # take from the largest-mass symbol first, then largest counts,
        # never emptying a nonzero-probability bin
        j = int(np.argmax(pmf))
        while remainder < 0:
            take = min(-remainder, int(counts[j]) - 1)
            counts[j] -= take
            remainder += take
            if remainder < 0:
                j = int(np.argmax(counts))
                if counts[j] <= 1:
                    raise EntropyCoderError("pmf cannot be quantized at this precision")
    cdf = np.concatenate([[0], np.cumsum(counts)])
    return QuantizedCdf(cdf=cdf, precision=precision, offset=offset)


class RangeEncoder:
    """Single-use encoding session. Feed symbols, then call ``finish``."""

    def __init__(self):
        self._low = 0
        self._range = _MASK
        self._chunks: list[int] = []

    def encode(self, symbol: int, cdf: QuantizedCdf) -> None:
        table = cdf._cdf_list
        if not (0 <= symbol < len(table) - 1):
            raise EntropyCoderError(f"symbol {symbol} outside alphabet")
        lo = table[symbol]
        hi = table[symbol + 1]
        if hi <= lo:
            raise EntropyCoderError(f"zero-width bin for symbol {symbol}")
        r = self._range >> cdf.precision
        self._low += lo * r
        if self._low > _MASK:
            self._propagate_carry()
            self._low &= _MASK
        self._range = (hi - lo) * r
        while self._range < _BOTTOM:
            self._chunks.append((self._low >> (STATE_BITS - RENORM_BITS)) & _CHUNK_MASK)
            self._low = (self._low << RENORM_BITS) & _MASK
            self._range <<= RENORM_BITS

    def _propagate_carry(self):
        chunks = self._chunks
        i = len(chunks) - 1
        while i >= 0 and chunks[i] == _CHUNK_MASK:
            chunks[i] = 0
            i -= 1
        assert i >= 0, "carry escaped the stream start"
        chunks[i] += 1

    def finish(self) -> bytes:
        # Flush the smallest multiple of 2^32 inside [low, low+range); its
        # bottom 32 bits are zero, so a single 16-bit chunk terminates the
        # stream and the decoder completes it with zeros.
        c = (self._low + _BOTTOM - 1) & ~(_BOTTOM - 1)
        if c > _MASK:
            self._propagate_carry()
            c &= _MASK
        self._chunks.append((c >> (STATE_BITS - RENORM_BITS)) & _CHUNK_MASK)
        out = self._chunks
        self._chunks = None  # session is done
        return struct.pack(f">{len(out)}H", *out)


class RangeDecoder:
    """Single-use decoding session over one payload.

    Call ``decode`` once per symbol with the same CDF sequence used for
    encoding, then ``finish`` to run the trailing consistency check (exact
    chunk count and zero completion), which catches truncation, trailing
    garbage and CDF mismatches.
    """

    def __init__(self, payload: bytes):
        if len(payload) % 2 != 0 or len(payload) < 2:
            raise CorruptPayloadError(f"payload length {len(payload)} is not a chunk multiple")
        self._chunks = struct.unpack(f">{len(payload) // 2}H", payload)
        self._pos = 0
        self._overrun = 0
        self._rel = 0
        self._range = _MASK
        for _ in range(STATE_BITS // RENORM_BITS):
            self._rel = (self._rel << RENORM_BITS) | self._next_chunk()

    def _next_chunk(self) -> int:
        if self._pos < len(self._chunks):
            c = self._chunks[self._pos]
        else:
            c = 0
            self._overrun += 1
        self._pos += 1
        return c

    def decode(self, cdf: QuantizedCdf) -> int:
        table = cdf._cdf_list
        r = self._range >> cdf.precision
        val = self._rel // r
        if val >= (1 << cdf.precision):
            raise CorruptPayloadError("decoded value outside CDF total")
        symbol = bisect.bisect_right(table, val) - 1
        lo = table[symbol]
        hi = table[symbol + 1]
        self._rel -= lo * r
        self._range = (hi - lo) * r
        while self._range < _BOTTOM:
            self._range <<= RENORM_BITS
            self._rel = (self._rel << RENORM_BITS) | self._next_chunk()
        return symbol

    def finish(self) -> None:
        consumed = self._pos - self._overrun
        if self._overrun != 2 or consumed != len(self._chunks):
            raise CorruptPayloadError(
                f"trailing sentinel check failed: {len(self._chunks)} chunks, "
                f"{consumed} consumed, {self._overrun} overrun"
            )


def range_encode(symbols, cdfs) -> bytes:
    """Encode ``symbols[i]`` under ``cdfs[i]``. Decodable by ``range_decode``."""
    if len(symbols) != len(cdfs):
        raise EntropyCoderError("symbols and cdfs must have equal length")
    enc = RangeEncoder()
    for s, cdf in zip(symbols, cdfs):
        enc.encode(int(s), cdf)
    return enc.finish()


def range_decode(payload: bytes, cdfs) -> list:
    """Exact inverse of ``range_encode`` given the identical CDF sequence."""
    dec = RangeDecoder(payload)
    out = [dec.decode(cdf) for cdf in cdfs]
    dec.finish()
    return out


def cdf_bits(symbols, cdfs) -> float:
    """Ideal code length sum(-log2(width/total)) for the given assignment."""
    bits = 0.0
    for s, cdf in zip(symbols, cdfs):
        bits += cdf.precision - np.log2(cdf.width(int(s)))
    return float(bits)


def likelihood_bits(value, mean, scale, bits_cap: float = BITS_CAP) -> torch.Tensor:
    """Differentiable bit cost of ``value`` under N(mean, scale^2) * U(-.5,.5).

    Returns -log2(Phi((v-m+.5)/s) - Phi((v-m-.5)/s)) elementwise, clamped to
    [0, bits_cap]. ``scale`` must already respect SCALE_FLOOR. Plain Python /
    numpy inputs are promoted to float64; tensor inputs keep their dtype.
    """
    if any(isinstance(x, (torch.Tensor, np.ndarray)) for x in (value, mean, scale)):
        tensors = [torch.as_tensor(x) for x in (value, mean, scale)]
    else:
        tensors = [torch.as_tensor(x, dtype=torch.float64) for x in (value, mean, scale)]
    value, mean, scale = tensors
    for t in tensors:
        if not torch.all(torch.isfinite(t)):
            raise ValueError("likelihood_bits requires finite inputs")
    if torch.any(scale < SCALE_FLOOR - 1e-9):
        raise ValueError(f"scale below floor {SCALE_FLOOR}")

    centered = value - mean
    upper = (centered + 0.5) / scale
    lower = (centered - 0.5) / scale
    # erfc keeps relative precision in the tails where erf/ndtr saturate
    inv_sqrt2 = 0.7071067811865476
    p_pos = 0.5 * (torch.special.erfc(lower * inv_sqrt2) - torch.special.erfc(upper * inv_sqrt2))
    p_neg = 0.5 * (torch.special.erfc(-upper * inv_sqrt2) - torch.special.erfc(-lower * inv_sqrt2))
    p = torch.where(centered >= 0, p_pos, p_neg)
    bits = -torch.log2(torch.clamp(p, min=2.0 ** (-bits_cap)))
    return torch.clamp(bits, min=0.0)
