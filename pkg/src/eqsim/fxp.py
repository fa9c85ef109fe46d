"""Arbitrary-width two's-complement fixed-point arithmetic.

Raw values are plain integers (Python ``int`` for scalars, ``int64`` numpy
arrays for tensors). A raw integer ``q`` in format ``fmt`` represents the
real value ``q * 2**-fmt.frac_bits``. Every narrowing step rounds
half-to-even and saturates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FxpFormat:
    total_bits: int
    frac_bits: int
    signed: bool = True

    def __post_init__(self):
        if not 1 <= self.total_bits <= 64:
            raise ValueError(f"total_bits must be in 1..64, got {self.total_bits}")
        if not 0 <= self.frac_bits <= self.total_bits:
            raise ValueError(
                f"frac_bits must be in 0..total_bits, got {self.frac_bits}")

    @property
    def min_raw(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def max_raw(self) -> int:
        if self.signed:
            return (1 << (self.total_bits - 1)) - 1
        return (1 << self.total_bits) - 1

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return self.min_raw * self.ulp

    @property
    def max_value(self) -> float:
        return self.max_raw * self.ulp

    def contains(self, raw) -> bool:
        raw = np.asarray(raw)
        return bool(np.all((raw >= self.min_raw) & (raw <= self.max_raw)))

    def __str__(self):
        return f"{'s' if self.signed else 'u'}{self.total_bits}.{self.frac_bits}"


@dataclass(frozen=True)
class Fxp:
    """A scalar fixed-point value."""

    raw: int
    fmt: FxpFormat

    def __post_init__(self):
        if not self.fmt.min_raw <= self.raw <= self.fmt.max_raw:
            raise ValueError(f"raw {self.raw} outside range of {self.fmt}")

    @property
    def value(self) -> float:
        return self.raw * self.fmt.ulp

    def __float__(self):
        return self.value


class FxpTensor:
    """Batch x channel x position tensor of raw integers in one format."""

    __slots__ = ("data", "fmt")

    def __init__(self, data, fmt: FxpFormat, check: bool = True):
        data = np.asarray(data, dtype=np.int64)
        if data.ndim != 3:
            raise ValueError(f"FxpTensor needs a 3-D (B, C, S) array, got shape {data.shape}")
        if check and not fmt.contains(data):
            raise ValueError(f"raw data outside range of {fmt}")
        self.data = data
        self.fmt = fmt

    @property
    def shape(self):
        return self.data.shape

    def values(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.fmt.ulp

    @classmethod
    def from_real(cls, x, fmt: FxpFormat) -> "FxpTensor":
        return cls(quantize_array(x, fmt), fmt, check=False)

    def copy(self) -> "FxpTensor":
        return FxpTensor(self.data.copy(), self.fmt, check=False)

    def __eq__(self, other):
        if not isinstance(other, FxpTensor):
            return NotImplemented
        return self.fmt == other.fmt and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"FxpTensor(shape={self.shape}, fmt={self.fmt})"


def saturate(raw, fmt: FxpFormat):
    if isinstance(raw, (int, np.integer)):
        return int(min(max(int(raw), fmt.min_raw), fmt.max_raw))
    return np.clip(raw, fmt.min_raw, fmt.max_raw)


def shift_round(raw, shift: int):
    """Scale raw integers by ``2**-shift`` with round-half-to-even.

    Negative ``shift`` is an exact left shift. Works on Python ints and int64
    arrays; for arrays the caller guarantees no int64 overflow.
    """
    if shift <= 0:
        if isinstance(raw, (int, np.integer)):
            return int(raw) << -shift
        return np.left_shift(raw, -shift)
    if isinstance(raw, (int, np.integer)):
        raw = int(raw)
        q = raw >> shift
        r = raw - (q << shift)
        half = 1 << (shift - 1)
        if r > half or (r == half and q & 1):
            q += 1
        return q
    raw = np.asarray(raw, dtype=np.int64)
    q = raw >> shift
    r = raw - (q << shift)
    half = np.int64(1) << (shift - 1)
    up = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + up


def convert(raw, src_frac: int, fmt: FxpFormat):
    """Move raw integers from ``src_frac`` fraction bits into ``fmt``."""
    return saturate(shift_round(raw, src_frac - fmt.frac_bits), fmt)


def quantize(x: float, fmt: FxpFormat) -> Fxp:
    if not math.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x!r}")
    # round() on a float is round-half-even; the scaling by 2**f is exact
    raw = round(math.ldexp(float(x), fmt.frac_bits))
    return Fxp(saturate(raw, fmt), fmt)


def quantize_array(x, fmt: FxpFormat) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    scaled = np.rint(np.ldexp(x, fmt.frac_bits))
    lo, hi = float(fmt.min_raw), float(fmt.max_raw)
    return np.clip(scaled, lo, hi).astype(np.int64)


def fxp_mul(a: Fxp, b: Fxp, out_fmt: FxpFormat) -> Fxp:
    prod = a.raw * b.raw
    src_frac = a.fmt.frac_bits + b.fmt.frac_bits
    return Fxp(convert(prod, src_frac, out_fmt), out_fmt)


def fxp_add(a: Fxp, b: Fxp, out_fmt: FxpFormat) -> Fxp:
    frac = max(a.fmt.frac_bits, b.fmt.frac_bits)
    total = (a.raw << (frac - a.fmt.frac_bits)) + (b.raw << (frac - b.fmt.frac_bits))
    return Fxp(convert(total, frac, out_fmt), out_fmt)


def requantize(t: FxpTensor, fmt: FxpFormat) -> FxpTensor:
    if fmt == t.fmt:
        return t.copy()
    return FxpTensor(convert(t.data, t.fmt.frac_bits, fmt), fmt, check=False)
