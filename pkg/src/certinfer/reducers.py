"""Summation and dot product algorithms over the scalar types.

All reducers take an explicit ``zero`` element so the result of an empty
reduction carries the right format. The generic reducers (naive, pairwise,
kn) work on any scalar supporting +, -, abs and comparison; the exact
reducer dispatches on the scalar type because its accumulator is
representation-specific.

Error-free transformations (two_sum, two_product) and the compensated dot
product built on them require round-to-nearest-even: under truncating or
away rounding the residual of an addition need not be representable, so
those entry points raise UnsupportedModeError for other modes.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Callable, Sequence, Tuple, Union

from .errors import InvalidOperationError, UnsupportedModeError
from .fixedpoint import FixedPoint
from .rounding import RoundingMode, round_shift_signed
from .softfloat import SoftFloat

Scalar = Union[SoftFloat, FixedPoint]


# -- plain summation ----------------------------------------------------------


def sum_naive(values: Sequence[Scalar], zero: Scalar) -> Scalar:
    """Left-to-right fold; one rounding per addition."""
    acc = zero
    for v in values:
        acc = acc + v
    return acc


def sum_pairwise(values: Sequence[Scalar], zero: Scalar) -> Scalar:
    """Balanced recursive summation; the left half gets the extra element."""
    n = len(values)
    if n == 0:
        return zero
    if n == 1:
        return zero + values[0]

    def rec(lo: int, hi: int) -> Scalar:
        if hi - lo == 1:
            return values[lo]
        mid = lo + (hi - lo + 1) // 2
        return rec(lo, mid) + rec(mid, hi)

    return rec(0, n)


def sum_kn(values: Sequence[Scalar], zero: Scalar) -> Scalar:
    """Compensated summation; the correction joins the total exactly once."""
    if not values:
        return zero
    total = zero + values[0]
    comp = zero
    for v in values[1:]:
        t = total + v
        if abs(total) >= abs(v):
            comp = comp + ((total - t) + v)
        else:
            comp = comp + ((v - t) + total)
        total = t
    return total + comp


class ExactAccumulator:
    """Unbounded integer accumulator holding an exact running sum.

    The sum is kept as ``acc * 2**scale``; adding a value aligns the scale
    down to the smaller exponent, so no information is ever dropped. The
    single rounding happens in :meth:`result`.
    """

    __slots__ = ("acc", "scale", "_started")

    def __init__(self) -> None:
        self.acc = 0
        self.scale = 0
        self._started = False

    def add(self, x: SoftFloat) -> None:
        if x.is_infinite:
            raise InvalidOperationError("cannot accumulate an infinity exactly")
        if x.is_zero:
            return
        m = -x.mant if x.sign else x.mant
        if not self._started:
            self.acc, self.scale, self._started = m, x.exp, True
            return
        if x.exp >= self.scale:
            self.acc += m << (x.exp - self.scale)
        else:
            self.acc <<= self.scale - x.exp
            self.scale = x.exp
            self.acc += m

    def add_product(self, x: SoftFloat, y: SoftFloat) -> None:
        """Accumulate the exact (unrounded) product of two finite values."""
        if x.is_infinite or y.is_infinite:
            raise InvalidOperationError("cannot accumulate an infinity exactly")
        if x.is_zero or y.is_zero:
            return
        sign = x.sign != y.sign
        prod = x.mant * y.mant
        self._add_scaled(-prod if sign else prod, x.exp + y.exp)

    def _add_scaled(self, m: int, e: int) -> None:
        if not self._started:
            self.acc, self.scale, self._started = m, e, True
        elif e >= self.scale:
            self.acc += m << (e - self.scale)
        else:
            self.acc <<= self.scale - e
            self.scale = e
            self.acc += m

    def as_fraction(self) -> Fraction:
        return Fraction(self.acc) * Fraction(2) ** self.scale

    def result(self, pbits: int, mode: RoundingMode) -> SoftFloat:
        return SoftFloat.from_scaled_int(self.acc, self.scale, pbits, mode)


def sum_exact(values: Sequence[Scalar], zero: Scalar) -> Scalar:
    """Exact accumulation with a single rounding at the end."""
    if isinstance(zero, SoftFloat):
        acc = ExactAccumulator()
        for v in values:
            acc.add(v)
        return acc.result(zero.pbits, zero.mode)
    if isinstance(zero, FixedPoint):
        # fixed addition is exact anyway; only the final value meets the range check
        raw = sum(v.raw for v in values)
        return FixedPoint(raw, zero.fmt)
    raise TypeError(f"unsupported scalar type {type(zero).__name__}")


SUM_REDUCERS: dict[str, Callable[[Sequence[Scalar], Scalar], Scalar]] = {
    "naive": sum_naive,
    "pairwise": sum_pairwise,
    "kn": sum_kn,
    "exact": sum_exact,
}


# -- error-free transformations ------------------------------------------------


def _require_rne(x: SoftFloat, what: str) -> None:
    if x.mode is not RoundingMode.RNE:
        raise UnsupportedModeError(f"{what} requires round-to-nearest-even, got {x.mode}")


def two_sum(a: SoftFloat, b: SoftFloat) -> Tuple[SoftFloat, SoftFloat]:
    """Return (s, e) with s = fl(a+b) and s + e = a + b exactly."""
    _require_rne(a, "two_sum")
    s = a + b
    bv = s - a
    e = (a - (s - bv)) + (b - bv)
    return s, e


def two_product(a: SoftFloat, b: SoftFloat) -> Tuple[SoftFloat, SoftFloat]:
    """Return (p, e) with p = fl(a*b) and p + e = a * b exactly.

    The residual of a correctly rounded product always fits in the working
    precision (the exact product has at most 2p mantissa bits), so it is
    extracted directly from the integer product rather than via a split.
    """
    _require_rne(a, "two_product")
    p = a * b
    if a.is_zero or b.is_zero or p.is_infinite:
        return p, SoftFloat.zero(a.pbits, a.mode)
    exact_m = a.mant * b.mant
    exact_e = a.exp + b.exp
    sign = a.sign != b.sign
    if sign:
        exact_m = -exact_m
    # residual = exact - p, aligned at min(exact_e, p.exp)
    e_lo = min(exact_e, p.exp)
    res = (exact_m << (exact_e - e_lo)) - ((-p.mant if p.sign else p.mant) << (p.exp - e_lo))
    err = SoftFloat.from_scaled_int(res, e_lo, a.pbits, a.mode)
    return p, err


# -- dot products ----------------------------------------------------------------


def _check_lengths(xs: Sequence, ys: Sequence) -> None:
    if len(xs) != len(ys):
        raise ValueError(f"dot product length mismatch: {len(xs)} vs {len(ys)}")


def dot_float_naive(
    xs: Sequence[SoftFloat],
    ys: Sequence[SoftFloat],
    zero: SoftFloat,
    sum_reducer: Callable[[Sequence[Scalar], Scalar], Scalar] = sum_naive,
) -> SoftFloat:
    """Round each product once, then reduce with the chosen summation."""
    _check_lengths(xs, ys)
    return sum_reducer([x * y for x, y in zip(xs, ys)], zero)


def dot_float_oro(
    xs: Sequence[SoftFloat], ys: Sequence[SoftFloat], zero: SoftFloat
) -> SoftFloat:
    """Compensated dot product: transforms every product and partial sum
    error-free and folds the residuals into a single correction term."""
    _check_lengths(xs, ys)
    _require_rne(zero, "compensated dot product")
    if not xs:
        return zero
    p, s = two_product(xs[0], ys[0])
    for x, y in zip(xs[1:], ys[1:]):
        h, r = two_product(x, y)
        p, q = two_sum(p, h)
        s = s + (q + r)
    return p + s


def dot_fixed_naive(
    xs: Sequence[FixedPoint], ys: Sequence[FixedPoint], zero: FixedPoint
) -> FixedPoint:
    """Shift-round each product to f bits, then add (fixed adds are exact)."""
    _check_lengths(xs, ys)
    fmt = zero.fmt
    raw = 0
    for x, y in zip(xs, ys):
        raw += round_shift_signed(x.raw * y.raw, fmt.fbits, fmt.mode)
    return FixedPoint(raw, fmt)


def dot_fixed_accurate(
    xs: Sequence[FixedPoint], ys: Sequence[FixedPoint], zero: FixedPoint
) -> FixedPoint:
    """Accumulate exact 2f-bit products, then shift-round once."""
    _check_lengths(xs, ys)
    fmt = zero.fmt
    wide = 0
    for x, y in zip(xs, ys):
        wide += x.raw * y.raw
    return FixedPoint(round_shift_signed(wide, fmt.fbits, fmt.mode), fmt)
