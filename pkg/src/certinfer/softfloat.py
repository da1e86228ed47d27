"""Arbitrary-precision binary floating point with explicit rounding control.

A :class:`SoftFloat` represents ``(-1)**sign * mantissa * 2**exponent`` where
the mantissa of a finite nonzero value is normalized to exactly ``p`` bits
(leading bit set). The exponent is an unbounded Python int, so there is no
overflow, no underflow and no subnormal range; the only special values are
the two signed infinities produced by dividing a nonzero value by zero.

Precision convention: ``p`` counts ALL significand bits including the
leading 1. IEEE formats quoted as "52 fraction bits" are p=53 here. Every
precision knob in this package follows this total-bits convention.

Each value carries its format (``p`` and rounding mode); operations require
both operands to share the format and raise :class:`FormatMismatchError`
otherwise. Every arithmetic result is correctly rounded: the mathematically
exact result is computed first, then rounded once.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import NamedTuple, Union

from .errors import FormatMismatchError, InvalidOperationError
from .rounding import RoundingMode, round_ratio

_FINITE = 0
_INF = 1

Number = Union[int, float, Fraction, "SoftFloat"]


class FloatFormat(NamedTuple):
    """Precision (total significand bits) plus rounding mode."""

    pbits: int
    mode: RoundingMode

    def validate(self) -> None:
        if self.pbits < 2:
            raise ValueError(f"precision must be at least 2 bits, got {self.pbits}")
        if not isinstance(self.mode, RoundingMode):
            raise TypeError("mode must be a RoundingMode")


def _check_same_format(a: "SoftFloat", b: "SoftFloat") -> None:
    if a.pbits != b.pbits or a.mode is not b.mode:
        raise FormatMismatchError(
            f"mixed formats: p={a.pbits}/{a.mode} vs p={b.pbits}/{b.mode}"
        )


def _round_mag_ratio(num: int, den: int, pbits: int, mode: RoundingMode) -> tuple[int, int]:
    """Correctly round the positive rational num/den to p bits.

    Returns (mantissa, exponent) with mantissa normalized to exactly p bits.
    """
    # locate e with den * 2**e <= num < den * 2**(e+1)
    e = num.bit_length() - den.bit_length()
    if e >= 0:
        if num < den << e:
            e -= 1
    else:
        if num << -e < den:
            e -= 1
    # scale so the quotient lands in [2**(p-1), 2**p)
    k = pbits - 1 - e
    if k >= 0:
        mant = round_ratio(num << k, den, mode)
    else:
        mant = round_ratio(num, den << -k, mode)
    if mant == 1 << pbits:  # rounding carried into the next binade
        mant >>= 1
        e += 1
    return mant, e - (pbits - 1)


class SoftFloat:
    """Immutable arbitrary-precision binary float. See the module docstring."""

    __slots__ = ("sign", "mant", "exp", "pbits", "mode", "_kind")

    def __init__(self, sign: bool, mant: int, exp: int, pbits: int, mode: RoundingMode):
        FloatFormat(pbits, mode).validate()
        if mant < 0:
            raise ValueError("mantissa must be non-negative; use the sign flag")
        if mant and mant.bit_length() != pbits:
            raise ValueError(
                f"mantissa must be normalized to exactly {pbits} bits, got {mant.bit_length()}"
            )
        self.sign = bool(sign) and mant != 0  # zero is signless
        self.mant = mant
        self.exp = exp if mant else 0
        self.pbits = pbits
        self.mode = mode
        self._kind = _FINITE

    # -- constructors ------------------------------------------------------

    @classmethod
    def zero(cls, pbits: int, mode: RoundingMode) -> "SoftFloat":
        return cls(False, 0, 0, pbits, mode)

    @classmethod
    def infinity(cls, sign: bool, pbits: int, mode: RoundingMode) -> "SoftFloat":
        v = cls(False, 0, 0, pbits, mode)
        v.sign = bool(sign)
        v._kind = _INF
        return v

    @classmethod
    def from_fraction(cls, value: Fraction, pbits: int, mode: RoundingMode) -> "SoftFloat":
        """Correctly round an exact rational into the format."""
        if value == 0:
            return cls.zero(pbits, mode)
        num, den = value.numerator, value.denominator
        sign = num < 0
        mant, exp = _round_mag_ratio(abs(num), den, pbits, mode)
        return cls(sign, mant, exp, pbits, mode)

    @classmethod
    def from_int(cls, value: int, pbits: int, mode: RoundingMode) -> "SoftFloat":
        return cls.from_fraction(Fraction(value), pbits, mode)

    @classmethod
    def from_float(cls, value: float, pbits: int, mode: RoundingMode) -> "SoftFloat":
        """Round a binary64 value into the format. Rejects NaN and infinities."""
        if math.isnan(value) or math.isinf(value):
            raise ValueError(f"cannot convert {value!r}; only finite values are representable")
        return cls.from_fraction(Fraction(value), pbits, mode)

    @classmethod
    def from_decimal(cls, text: str, pbits: int, mode: RoundingMode) -> "SoftFloat":
        """Parse a decimal string (e.g. "-12.375e-2") and round it once."""
        try:
            value = Fraction(text.strip())
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"invalid decimal literal {text!r}") from None
        return cls.from_fraction(value, pbits, mode)

    @classmethod
    def from_scaled_int(cls, signed_mant: int, exp: int, pbits: int, mode: RoundingMode) -> "SoftFloat":
        """Round ``signed_mant * 2**exp`` into the format."""
        if signed_mant == 0:
            return cls.zero(pbits, mode)
        sign = signed_mant < 0
        mag = abs(signed_mant)
        if exp >= 0:
            mant, e = _round_mag_ratio(mag << exp, 1, pbits, mode)
        else:
            mant, e = _round_mag_ratio(mag, 1 << -exp, pbits, mode)
        return cls(sign, mant, e, pbits, mode)

    # -- predicates and views ----------------------------------------------

    @property
    def is_zero(self) -> bool:
        return self._kind == _FINITE and self.mant == 0

    @property
    def is_finite(self) -> bool:
        return self._kind == _FINITE

    @property
    def is_infinite(self) -> bool:
        return self._kind == _INF

    @property
    def format(self) -> FloatFormat:
        return FloatFormat(self.pbits, self.mode)

    def as_fraction(self) -> Fraction:
        """Exact value as a rational. Raises on infinity."""
        if self._kind == _INF:
            raise OverflowError("infinity has no rational value")
        if self.mant == 0:
            return Fraction(0)
        mag = Fraction(self.mant) * Fraction(2) ** self.exp
        return -mag if self.sign else mag

    def to_float(self) -> float:
        """Nearest binary64 value (overflows to IEEE inf for huge exponents)."""
        if self._kind == _INF:
            return -math.inf if self.sign else math.inf
        if self.mant == 0:
            return 0.0
        try:
            mag = math.ldexp(self.mant, self.exp)
        except OverflowError:
            mag = math.inf
        return -mag if self.sign else mag

    def to_decimal(self) -> str:
        """Exact decimal rendering of the stored value."""
        if self._kind == _INF:
            return "-inf" if self.sign else "inf"
        if self.mant == 0:
            return "0"
        m, e = self.mant, self.exp
        tz = (m & -m).bit_length() - 1
        m >>= tz
        e += tz
        prefix = "-" if self.sign else ""
        if e >= 0:
            return prefix + str(m << e)
        whole, rem = divmod(m, 1 << -e)
        digits = str(rem * 5**-e).rjust(-e, "0").rstrip("0")
        return f"{prefix}{whole}.{digits}"

    # -- arithmetic ---------------------------------------------------------

    def _signed_mant(self) -> int:
        return -self.mant if self.sign else self.mant

    def __add__(self, other: "SoftFloat") -> "SoftFloat":
        if not isinstance(other, SoftFloat):
            return NotImplemented
        _check_same_format(self, other)
        if self._kind == _INF or other._kind == _INF:
            if self._kind == _INF and other._kind == _INF:
                if self.sign != other.sign:
                    raise InvalidOperationError("inf + -inf is undefined")
                return self
            return self if self._kind == _INF else other
        if self.mant == 0:
            return other
        if other.mant == 0:
            return self
        emin = min(self.exp, other.exp)
        total = (self._signed_mant() << (self.exp - emin)) + (
            other._signed_mant() << (other.exp - emin)
        )
        return SoftFloat.from_scaled_int(total, emin, self.pbits, self.mode)

    def __sub__(self, other: "SoftFloat") -> "SoftFloat":
        if not isinstance(other, SoftFloat):
            return NotImplemented
        return self.__add__(-other)

    def __neg__(self) -> "SoftFloat":
        if self._kind == _INF:
            return SoftFloat.infinity(not self.sign, self.pbits, self.mode)
        if self.mant == 0:
            return self
        return SoftFloat(not self.sign, self.mant, self.exp, self.pbits, self.mode)

    def __abs__(self) -> "SoftFloat":
        return -self if self.sign else self

    def __mul__(self, other: "SoftFloat") -> "SoftFloat":
        if not isinstance(other, SoftFloat):
            return NotImplemented
        _check_same_format(self, other)
        sign = self.sign != other.sign
        if self._kind == _INF or other._kind == _INF:
            if (self._kind == _FINITE and self.mant == 0) or (
                other._kind == _FINITE and other.mant == 0
            ):
                raise InvalidOperationError("inf * 0 is undefined")
            return SoftFloat.infinity(sign, self.pbits, self.mode)
        if self.mant == 0 or other.mant == 0:
            return SoftFloat.zero(self.pbits, self.mode)
        prod = self.mant * other.mant
        mant, e = _round_mag_ratio(prod, 1, self.pbits, self.mode)
        return SoftFloat(sign, mant, e + self.exp + other.exp, self.pbits, self.mode)

    def __truediv__(self, other: "SoftFloat") -> "SoftFloat":
        if not isinstance(other, SoftFloat):
            return NotImplemented
        _check_same_format(self, other)
        sign = self.sign != other.sign
        if self._kind == _INF:
            if other._kind == _INF:
                raise InvalidOperationError("inf / inf is undefined")
            return SoftFloat.infinity(sign, self.pbits, self.mode)
        if other._kind == _INF:
            return SoftFloat.zero(self.pbits, self.mode)
        if other.mant == 0:
            if self.mant == 0:
                raise InvalidOperationError("0 / 0 is undefined")
            return SoftFloat.infinity(sign, self.pbits, self.mode)
        if self.mant == 0:
            return SoftFloat.zero(self.pbits, self.mode)
        mant, e = _round_mag_ratio(self.mant, other.mant, self.pbits, self.mode)
        return SoftFloat(sign, mant, e + self.exp - other.exp, self.pbits, self.mode)

    # -- comparisons ---------------------------------------------------------

    def _cmp(self, other: "SoftFloat") -> int:
        _check_same_format(self, other)
        # infinities order below/above every finite value
        if self._kind == _INF or other._kind == _INF:
            a = (-1 if self.sign else 1) * (2 if self._kind == _INF else 0)
            b = (-1 if other.sign else 1) * (2 if other._kind == _INF else 0)
            if self._kind == _FINITE:
                a = 0 if self.mant == 0 else (-1 if self.sign else 1)
            if other._kind == _FINITE:
                b = 0 if other.mant == 0 else (-1 if other.sign else 1)
            return (a > b) - (a < b)
        if self.sign != other.sign:
            return -1 if self.sign else 1
        if self.mant == 0 or other.mant == 0:
            a = 0 if self.mant == 0 else (-1 if self.sign else 1)
            b = 0 if other.mant == 0 else (-1 if other.sign else 1)
            return (a > b) - (a < b)
        # same sign, both nonzero: compare magnitudes via aligned integers
        ea, eb = self.exp, other.exp
        emin = ea if ea < eb else eb
        ma = self.mant << (ea - emin)
        mb = other.mant << (eb - emin)
        r = (ma > mb) - (ma < mb)
        return -r if self.sign else r

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SoftFloat):
            return NotImplemented
        return self._cmp(other) == 0

    def __lt__(self, other: "SoftFloat") -> bool:
        return self._cmp(other) < 0

    def __le__(self, other: "SoftFloat") -> bool:
        return self._cmp(other) <= 0

    def __gt__(self, other: "SoftFloat") -> bool:
        return self._cmp(other) > 0

    def __ge__(self, other: "SoftFloat") -> bool:
        return self._cmp(other) >= 0

    def __hash__(self) -> int:
        if self._kind == _INF:
            return hash(("softfloat-inf", self.sign))
        if self.mant == 0:
            return hash(("softfloat", 0, 0))
        tz = (self.mant & -self.mant).bit_length() - 1
        return hash(("softfloat", self.sign, self.mant >> tz, self.exp + tz))

    def __bool__(self) -> bool:
        return self._kind == _INF or self.mant != 0

    def __repr__(self) -> str:
        if self._kind == _INF:
            body = "-inf" if self.sign else "inf"
        else:
            body = self.to_decimal()
        return f"SoftFloat({body}, p={self.pbits}, {self.mode})"


def round_to_precision(value: Number, pbits: int, mode: RoundingMode) -> SoftFloat:
    """Round an int, float, Fraction or SoftFloat into the given format."""
    if isinstance(value, SoftFloat):
        if value.is_infinite:
            return SoftFloat.infinity(value.sign, pbits, mode)
        return SoftFloat.from_fraction(value.as_fraction(), pbits, mode)
    if isinstance(value, bool):
        raise TypeError("bool is not a numeric operand")
    if isinstance(value, int):
        return SoftFloat.from_int(value, pbits, mode)
    if isinstance(value, float):
        return SoftFloat.from_float(value, pbits, mode)
    if isinstance(value, Fraction):
        return SoftFloat.from_fraction(value, pbits, mode)
    raise TypeError(f"cannot convert {type(value).__name__} to SoftFloat")
