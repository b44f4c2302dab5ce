"""Bit-level emulation of FP8 (E4M3, E5M2) and BF16 storage formats.

Everything here is a pure function of its inputs. BF16 values are carried as
float32 arrays whose low 16 mantissa bits are zero; FP8 values are carried as
uint8 code arrays plus a tensor-level scale.

Conventions
-----------
* E4M3 is the saturating "fn" flavour: no infinities, one NaN magnitude
  pattern (0x7F / 0xFF), largest finite value 448.
* E5M2 follows IEEE: 0x7C is +inf, 0x7D..0x7F are NaN, largest finite 57344.
* Subnormals are kept in both formats.
* Finite inputs beyond the largest finite value saturate to +-fmax.
* Scales are multipliers applied before encoding: ``codes = encode(x * scale)``.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "F8Kind",
    "NonFiniteError",
    "ScaledQuant",
    "RngKey",
    "fmax",
    "decode_table",
    "f8_encode",
    "f8_decode",
    "absmax",
    "quantize_absmax",
    "quantize_with_absmax",
    "dequantize",
    "round_bf16",
    "is_bf16",
    "stochastic_round_bf16",
    "rng_uniform",
    "philox_bits",
    "stream_id",
]


class NonFiniteError(ArithmeticError):
    """Raised when a NaN (or inf) shows up where training must stay finite."""


class F8Kind(enum.Enum):
    E4M3 = "e4m3"
    E5M2 = "e5m2"

    @property
    def exponent_bits(self) -> int:
        return 4 if self is F8Kind.E4M3 else 5

    @property
    def mantissa_bits(self) -> int:
        return 3 if self is F8Kind.E4M3 else 2

    @property
    def bias(self) -> int:
        return (1 << (self.exponent_bits - 1)) - 1

    @classmethod
    def parse(cls, name: "str | F8Kind") -> "F8Kind":
        if isinstance(name, F8Kind):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown FP8 kind {name!r}; expected 'e4m3' or 'e5m2'") from None


def _decode_bits(code: int, kind: F8Kind) -> float:
    sign = -1.0 if code & 0x80 else 1.0
    m_bits = kind.mantissa_bits
    exp = (code >> m_bits) & ((1 << kind.exponent_bits) - 1)
    mant = code & ((1 << m_bits) - 1)
    top = (1 << kind.exponent_bits) - 1
    if kind is F8Kind.E4M3:
        if exp == top and mant == (1 << m_bits) - 1:
            return float("nan")
    elif exp == top:
        return sign * float("inf") if mant == 0 else float("nan")
    if exp == 0:
        return sign * mant * 2.0 ** (1 - kind.bias - m_bits)
    return sign * (1.0 + mant / (1 << m_bits)) * 2.0 ** (exp - kind.bias)


def _build_tables(kind: F8Kind):
    table = np.array([_decode_bits(c, kind) for c in range(256)], dtype=np.float64)
    finite = np.isfinite(table)
    # positive finite codes are monotone in their bit pattern
    pos_codes = np.array([c for c in range(128) if finite[c]], dtype=np.int64)
    pos_vals = table[pos_codes]
    assert np.all(np.diff(pos_vals) > 0)
    return table, pos_codes, pos_vals


_TABLES = {k: _build_tables(k) for k in F8Kind}
_DECODE32 = {k: _TABLES[k][0].astype(np.float32) for k in F8Kind}
_NAN_CODE = 0x7F
_INF_CODE_E5M2 = 0x7C


def decode_table(kind: F8Kind) -> np.ndarray:
    """All 256 decoded values of ``kind`` as float64 (copy)."""
    return _TABLES[F8Kind.parse(kind)][0].copy()


def fmax(kind: F8Kind) -> float:
    """Largest finite magnitude, found by enumerating every bit pattern."""
    table = _TABLES[F8Kind.parse(kind)][0]
    return float(np.max(np.abs(table[np.isfinite(table)])))


_FMAX = {k: fmax(k) for k in F8Kind}


def f8_encode(x, kind: F8Kind) -> np.ndarray:
    """Round-to-nearest-even encode of ``x`` (scalar or array) into uint8 codes."""
    kind = F8Kind.parse(kind)
    _, pos_codes, pos_vals = _TABLES[kind]
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    nan = np.isnan(x)
    a_safe = np.where(nan, 0.0, a)

    hi = np.searchsorted(pos_vals, a_safe, side="left")
    hi = np.minimum(hi, len(pos_vals) - 1)
    lo = np.maximum(hi - 1, 0)
    d_lo = a_safe - pos_vals[lo]
    d_hi = pos_vals[hi] - a_safe
    c_lo = pos_codes[lo]
    c_hi = pos_codes[hi]
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (c_hi % 2 == 0))
    mag = np.where(pick_hi, c_hi, c_lo)
    mag = np.where(a_safe <= pos_vals[0], pos_codes[0], mag)
    mag = np.where(a_safe >= pos_vals[-1], pos_codes[-1], mag)
    if kind is F8Kind.E5M2:
        mag = np.where(np.isinf(x), _INF_CODE_E5M2, mag)
    codes = mag | np.where(np.signbit(x), 0x80, 0)
    codes = np.where(nan, _NAN_CODE, codes)
    return codes.astype(np.uint8)


def f8_decode(code, kind: F8Kind) -> np.ndarray:
    """Decode uint8 codes to float32 (exact)."""
    return _DECODE32[F8Kind.parse(kind)][np.asarray(code, dtype=np.uint8)]


def absmax(t) -> np.float32:
    """Largest magnitude in ``t`` (0 for empty or all-zero input).

    Raises NonFiniteError on NaN or inf, which is how divergence surfaces.
    """
    t = np.asarray(t, dtype=np.float32)
    if t.size == 0:
        return np.float32(0.0)
    m = np.max(np.abs(t))
    if not np.isfinite(m):
        raise NonFiniteError(f"non-finite value ({m}) encountered while computing absmax")
    return np.float32(m)


@dataclass(frozen=True)
class ScaledQuant:
    """FP8 codes with one tensor-level scale.

    ``decode(codes) / scale`` recovers the approximated values.
    """

    codes: np.ndarray
    kind: F8Kind
    scale: np.float32
    source_absmax: np.float32

    @property
    def shape(self) -> tuple:
        return self.codes.shape

    def decoded(self) -> np.ndarray:
        """Scaled-domain values, ``decode(codes)`` without dividing out the scale."""
        return f8_decode(self.codes, self.kind)

    def dequantize(self) -> np.ndarray:
        return dequantize(self)

    def transpose(self) -> "ScaledQuant":
        return ScaledQuant(np.ascontiguousarray(self.codes.T), self.kind, self.scale, self.source_absmax)

    @property
    def nbytes(self) -> int:
        return int(self.codes.size) + 4


def _scale_for(amax: np.float32, kind: F8Kind) -> np.float32:
    if amax == 0:
        return np.float32(1.0)
    return np.float32(np.float32(_FMAX[kind]) / np.float32(amax))


def quantize_with_absmax(t, kind: F8Kind, amax) -> ScaledQuant:
    """Quantize using an already known absmax (no reduction pass).

    Used on the recompute path, where the forward pass cached the statistic.
    """
    kind = F8Kind.parse(kind)
    t = np.asarray(t, dtype=np.float32)
    amax = np.float32(amax)
    scale = _scale_for(amax, kind)
    codes = f8_encode(t * scale, kind)
    return ScaledQuant(codes, kind, scale, amax)


def quantize_absmax(t, kind: F8Kind) -> ScaledQuant:
    """Just-in-time absmax scaling: the largest element maps onto fmax."""
    return quantize_with_absmax(t, kind, absmax(t))


def dequantize(q: ScaledQuant) -> np.ndarray:
    return f8_decode(q.codes, q.kind) / q.scale


# --------------------------------------------------------------------------
# BF16


def _bits(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)


def round_bf16(x) -> np.ndarray:
    """Round-to-nearest-even float32 -> bf16 (returned as float32)."""
    x = np.asarray(x, dtype=np.float32)
    b = _bits(x).astype(np.uint64)
    rounded = (b + 0x7FFF + ((b >> 16) & 1)) & 0xFFFF0000
    out = rounded.astype(np.uint32).view(np.float32).reshape(x.shape)
    return np.where(np.isnan(x), x, out)


def is_bf16(x) -> bool:
    return bool(np.all((_bits(x) & 0xFFFF) == 0))


# --------------------------------------------------------------------------
# counter-based random bits

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
ROUNDS = 10


@dataclass(frozen=True)
class RngKey:
    """Address of one random draw. No internal state: same key, same bits."""

    seed: int
    stream: int = 0
    counter: int = 0

    def at(self, counter: int) -> "RngKey":
        return RngKey(self.seed, self.stream, counter)


def philox_bits(seed: int, stream: int, counters, rounds: int = ROUNDS) -> np.ndarray:
    """Philox-4x32 style mix of (seed, stream, counter) -> uint32, vectorized over counters.

    The 64-bit counter and 64-bit stream fill the four 32-bit counter words,
    the 64-bit seed fills the two key words.
    """
    ctr = np.asarray(counters, dtype=np.uint64)
    shape = ctr.shape
    ctr = ctr.ravel()
    c0 = ctr & _MASK32
    c1 = ctr >> np.uint64(32)
    stream &= 0xFFFFFFFFFFFFFFFF
    c2 = np.full_like(c0, stream & 0xFFFFFFFF)
    c3 = np.full_like(c0, stream >> 32)
    seed &= 0xFFFFFFFFFFFFFFFF
    k0 = seed & 0xFFFFFFFF
    k1 = seed >> 32
    for _ in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> np.uint64(32), p0 & _MASK32
        hi1, lo1 = p1 >> np.uint64(32), p1 & _MASK32
        c0, c1, c2, c3 = (
            hi1 ^ c1 ^ np.uint64(k0),
            lo1,
            hi0 ^ c3 ^ np.uint64(k1),
            lo0,
        )
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    return c0.astype(np.uint32).reshape(shape)


def rng_uniform(key: RngKey) -> int:
    """One uint32 draw at ``key``."""
    return int(philox_bits(key.seed, key.stream, np.array([key.counter]))[0])


def stream_id(*parts) -> int:
    """Stable 64-bit stream id from arbitrary labels (e.g. a parameter name)."""
    h = hashlib.blake2b("/".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def stochastic_round_bf16(x, key: RngKey) -> np.ndarray:
    """Round float32 values to a bf16 neighbour, up with probability equal to the
    fractional distance. Element ``i`` uses counter ``key.counter + i``.

    Exactly representable inputs are returned unchanged. Non-finite inputs pass
    through.
    """
    x = np.asarray(x, dtype=np.float32)
    counters = np.uint64(key.counter) + np.arange(x.size, dtype=np.uint64)
    r = philox_bits(key.seed, key.stream, counters).astype(np.uint64) & np.uint64(0xFFFF)
    b = _bits(x).ravel().astype(np.uint64)
    out = ((b + r) & np.uint64(0xFFFF0000)).astype(np.uint32).view(np.float32).reshape(x.shape)
    return np.where(np.isfinite(x), out, x)
