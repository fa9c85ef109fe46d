"""Two unsigned x signed products on one 27x18 hardware multiplier.

The wide port receives ``[0 | D2 (d bits) | w guard zeros | D1 (d bits)]`` and
the narrow port the sign-extended weight. The low ``d + w`` bits of the
product hold ``D1 * W``; the next ``d + w`` bits hold ``D2 * W`` minus one
whenever ``D1 * W`` is negative, because the sign extension of the lower
product borrows from the upper field. The correction therefore adds the sign
bit of the lower field, which is ``W < 0`` gated by ``D1 != 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MUL_PORTS = (27, 18)


class PackingError(ValueError):
    """Operand widths or signedness not supported by the packed multiplier."""


@dataclass(frozen=True)
class PackedMulSpec:
    d: int
    w: int
    mul_ports: tuple = MUL_PORTS

    @property
    def r(self) -> int:
        return self.d + self.w

    @property
    def word_bits(self) -> int:
        """Bits of the packed data word including the leading zero."""
        return 2 * self.d + self.w + 1


@dataclass(frozen=True)
class PackedProduct:
    raw: int
    r1: int
    r2_star: int
    r2: int


def check_mapping_constraints(spec: PackedMulSpec, w_signed: bool = True,
                              d_signed: bool = False,
                              shared_multiplicand: bool = True) -> list[str]:
    """Return the list of violated mapping constraints (empty when ok).

    The width check is the layout fit ``2d + w + 1 <= 27``. The printed
    alternative ``2w + d <= 26`` coincides with it at (d=10, w=6) and is not
    enforced.
    """
    wide, narrow = spec.mul_ports
    problems = []
    if not shared_multiplicand:
        problems.append("both products must share the multiplicand W")
    if not w_signed:
        problems.append("W must be signed (the correction assumes a signed multiplicand)")
    if d_signed:
        problems.append("D1 and D2 must be unsigned")
    if spec.d < 1 or spec.w < 2:
        problems.append(f"need d >= 1 and w >= 2, got d={spec.d}, w={spec.w}")
    if spec.word_bits > wide:
        problems.append(
            f"width: 2*d + w + 1 = {spec.word_bits} > {wide} (wide multiplier port)")
    if spec.w > narrow:
        problems.append(f"width: w = {spec.w} > {narrow} (narrow multiplier port)")
    if 2 * spec.r > wide + narrow:
        problems.append(
            f"width: result fields 2*(d + w) = {2 * spec.r} exceed the "
            f"{wide + narrow}-bit product")
    return problems


def _require_valid(spec: PackedMulSpec):
    problems = check_mapping_constraints(spec)
    if problems:
        raise PackingError("; ".join(problems))


def _to_signed(value, bits):
    """Reinterpret the low ``bits`` bits as two's complement."""
    mask = (1 << bits) - 1
    value = value & mask
    sign = 1 << (bits - 1)
    return (value ^ sign) - sign


def pack_operands(d1: int, d2: int, spec: PackedMulSpec) -> int:
    _require_valid(spec)
    limit = 1 << spec.d
    if not (0 <= d1 < limit and 0 <= d2 < limit):
        raise PackingError(f"operands must be unsigned {spec.d}-bit, got {d1}, {d2}")
    return d1 | (d2 << spec.r)


def unpack_operands(word: int, spec: PackedMulSpec) -> tuple[int, int]:
    mask = (1 << spec.d) - 1
    return word & mask, (word >> spec.r) & mask


def packed_product(d1: int, d2: int, weight: int, spec: PackedMulSpec) -> PackedProduct:
    word = pack_operands(d1, d2, spec)
    if not -(1 << (spec.w - 1)) <= weight < (1 << (spec.w - 1)):
        raise PackingError(f"weight must be signed {spec.w}-bit, got {weight}")
    wide, narrow = spec.mul_ports
    # the ports see the word zero-extended and the weight sign-extended
    a = _to_signed(word, wide)
    b = _to_signed(weight, narrow)
    raw = a * b
    r1 = _to_signed(raw, spec.r)
    r2_star = _to_signed(raw >> spec.r, spec.r)
    # W < 0 alone is not enough: D1 = 0 gives R1 = 0 and nothing to undo
    r2 = r2_star + 1 if r1 < 0 else r2_star
    return PackedProduct(raw=raw, r1=r1, r2_star=r2_star, r2=r2)


def packed_mul(d1: int, d2: int, weight: int, spec: PackedMulSpec) -> tuple[int, int]:
    p = packed_product(d1, d2, weight, spec)
    return p.r1, p.r2


def packed_mul_array(d1, d2, weight, spec: PackedMulSpec):
    """Vectorized ``packed_mul`` over broadcastable int64 arrays.

    Range checks are the caller's job; the datapath uses this in the inner
    loop of the packed convolution.
    """
    d1 = np.asarray(d1, dtype=np.int64)
    d2 = np.asarray(d2, dtype=np.int64)
    weight = np.asarray(weight, dtype=np.int64)
    r = spec.r
    raw = (d1 | (d2 << r)) * weight
    mask = (np.int64(1) << r) - 1
    sign = np.int64(1) << (r - 1)
    r1 = ((raw & mask) ^ sign) - sign
    r2_star = (((raw >> r) & mask) ^ sign) - sign
    return r1, r2_star + (r1 < 0)


def verify(spec: PackedMulSpec, samples: int | None = None, seed: int = 0,
           exhaustive_limit: int = 1 << 24):
    """Compare packed products with direct products.

    Exhaustive over all (D1, D2, W) when the triple space has at most
    ``exhaustive_limit`` points and ``samples`` is not given, otherwise
    ``samples`` random triples. Returns ``(tested, first_mismatch)``
    where the mismatch is ``(d1, d2, w, got, expected)`` or None.
    """
    _require_valid(spec)
    space = 1 << (2 * spec.d + spec.w)
    wmin = -(1 << (spec.w - 1))
    if samples is None and space <= exhaustive_limit:
        grid = np.arange(space, dtype=np.int64)
        d1 = grid & ((1 << spec.d) - 1)
        d2 = (grid >> spec.d) & ((1 << spec.d) - 1)
        w = (grid >> (2 * spec.d)) + wmin
    else:
        n = samples if samples is not None else 1_000_000
        rng = np.random.default_rng(seed)
        d1 = rng.integers(0, 1 << spec.d, n, dtype=np.int64)
        d2 = rng.integers(0, 1 << spec.d, n, dtype=np.int64)
        w = rng.integers(wmin, -wmin, n, dtype=np.int64)
    r1, r2 = packed_mul_array(d1, d2, w, spec)
    bad = np.flatnonzero((r1 != d1 * w) | (r2 != d2 * w))
    if bad.size:
        i = bad[0]
        return len(d1), (int(d1[i]), int(d2[i]), int(w[i]),
                         (int(r1[i]), int(r2[i])), (int(d1[i] * w[i]), int(d2[i] * w[i])))
    return len(d1), None
