"""Fixed point arithmetic with an explicit shift-and-round primitive.

A :class:`FixedPoint` stores an unbounded signed integer ``raw`` and
represents ``raw * 2**-fbits``. The format allows ``mbits`` integer bits and
``fbits`` fraction bits; any result with ``|raw| >= 2**(mbits + fbits)``
raises :class:`RangeOverflowError` rather than saturating or wrapping, so a
sweep can detect the exact point where a model stops fitting the format.

Rounding happens only in :func:`shift_round` (and the operations built on
it). It rounds BY VALUE: truncation moves toward zero and ties-away moves
away from zero for negative inputs as well, so negating the input negates
the output exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Union

from .errors import FormatMismatchError, InvalidOperationError, RangeOverflowError
from .rounding import RoundingMode, round_ratio_signed, round_shift_signed

Number = Union[int, float, Fraction, "FixedPoint"]


@dataclass(frozen=True)
class FixedFormat:
    """Integer bits, fraction bits and the rounding mode used by operations."""

    fbits: int
    mode: RoundingMode
    mbits: int = 10

    def __post_init__(self) -> None:
        if self.mbits < 1:
            raise ValueError(f"mbits must be at least 1, got {self.mbits}")
        if self.fbits < 0:
            raise ValueError(f"fbits must be non-negative, got {self.fbits}")
        if not isinstance(self.mode, RoundingMode):
            raise TypeError("mode must be a RoundingMode")

    @property
    def raw_limit(self) -> int:
        """Exclusive bound on |raw|."""
        return 1 << (self.mbits + self.fbits)

    @property
    def resolution(self) -> Fraction:
        return Fraction(1, 1 << self.fbits)


class FixedPoint:
    """Immutable fixed point value. See the module docstring."""

    __slots__ = ("raw", "fmt")

    def __init__(self, raw: int, fmt: FixedFormat):
        if not isinstance(raw, int):
            raise TypeError("raw must be an int")
        if abs(raw) >= fmt.raw_limit:
            raise RangeOverflowError(
                f"raw value {raw} outside range of m={fmt.mbits} f={fmt.fbits} "
                f"(|raw| must stay below {fmt.raw_limit})"
            )
        self.raw = raw
        self.fmt = fmt

    # -- constructors ------------------------------------------------------

    @classmethod
    def zero(cls, fmt: FixedFormat) -> "FixedPoint":
        return cls(0, fmt)

    @classmethod
    def from_fraction(cls, value: Fraction, fmt: FixedFormat) -> "FixedPoint":
        """Round an exact rational to the nearest representable value."""
        scaled = value * (1 << fmt.fbits)
        raw = round_ratio_signed(scaled.numerator, scaled.denominator, fmt.mode)
        return cls(raw, fmt)

    @classmethod
    def from_float(cls, value: float, fmt: FixedFormat) -> "FixedPoint":
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError(f"cannot convert {value!r} to fixed point")
        return cls.from_fraction(Fraction(value), fmt)

    @classmethod
    def from_int(cls, value: int, fmt: FixedFormat) -> "FixedPoint":
        return cls(value << fmt.fbits, fmt)

    @classmethod
    def from_decimal(cls, text: str, fmt: FixedFormat) -> "FixedPoint":
        try:
            value = Fraction(text.strip())
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"invalid decimal literal {text!r}") from None
        return cls.from_fraction(value, fmt)

    # -- views ---------------------------------------------------------------

    def as_fraction(self) -> Fraction:
        return Fraction(self.raw, 1 << self.fmt.fbits)

    def to_float(self) -> float:
        return self.raw / float(1 << self.fmt.fbits)

    def to_decimal(self) -> str:
        """Exact decimal rendering of raw * 2**-fbits."""
        f = self.fmt.fbits
        sign = "-" if self.raw < 0 else ""
        mag = abs(self.raw)
        whole, rem = divmod(mag, 1 << f)
        if rem == 0:
            return f"{sign}{whole}"
        digits = str(rem * 5**f).rjust(f, "0").rstrip("0")
        return f"{sign}{whole}.{digits}"

    @property
    def is_zero(self) -> bool:
        return self.raw == 0

    # -- arithmetic -----------------------------------------------------------

    def _check(self, other: "FixedPoint") -> None:
        if self.fmt != other.fmt:
            raise FormatMismatchError(f"mixed fixed formats: {self.fmt} vs {other.fmt}")

    def __add__(self, other: "FixedPoint") -> "FixedPoint":
        if not isinstance(other, FixedPoint):
            return NotImplemented
        self._check(other)
        return FixedPoint(self.raw + other.raw, self.fmt)

    def __sub__(self, other: "FixedPoint") -> "FixedPoint":
        if not isinstance(other, FixedPoint):
            return NotImplemented
        self._check(other)
        return FixedPoint(self.raw - other.raw, self.fmt)

    def __neg__(self) -> "FixedPoint":
        return FixedPoint(-self.raw, self.fmt)

    def __abs__(self) -> "FixedPoint":
        return FixedPoint(abs(self.raw), self.fmt)

    def __mul__(self, other: "FixedPoint") -> "FixedPoint":
        """Exact 2f-bit product, then one shift_round back to f bits."""
        if not isinstance(other, FixedPoint):
            return NotImplemented
        self._check(other)
        raw = round_shift_signed(self.raw * other.raw, self.fmt.fbits, self.fmt.mode)
        return FixedPoint(raw, self.fmt)

    def div_by_int(self, n: int) -> "FixedPoint":
        """Divide by a positive integer with a single rounding."""
        if n == 0:
            raise InvalidOperationError("division by zero")
        if n < 0:
            raise ValueError("div_by_int expects a positive divisor")
        return FixedPoint(round_ratio_signed(self.raw, n, self.fmt.mode), self.fmt)

    # -- comparisons ------------------------------------------------------------

    def _cmp(self, other: "FixedPoint") -> int:
        self._check(other)
        return (self.raw > other.raw) - (self.raw < other.raw)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FixedPoint):
            return NotImplemented
        return self._cmp(other) == 0

    def __lt__(self, other: "FixedPoint") -> bool:
        return self._cmp(other) < 0

    def __le__(self, other: "FixedPoint") -> bool:
        return self._cmp(other) <= 0

    def __gt__(self, other: "FixedPoint") -> bool:
        return self._cmp(other) > 0

    def __ge__(self, other: "FixedPoint") -> bool:
        return self._cmp(other) >= 0

    def __hash__(self) -> int:
        return hash(("fixed", self.as_fraction()))

    def __bool__(self) -> bool:
        return self.raw != 0

    def __repr__(self) -> str:
        return (
            f"FixedPoint({self.to_decimal()}, m={self.fmt.mbits}, "
            f"f={self.fmt.fbits}, {self.fmt.mode})"
        )


def shift_round(raw2f: int, fbits: int, mode: RoundingMode) -> int:
    """Round a raw integer carrying 2f fraction bits down to f bits.

    This is the single rounding primitive of the fixed point type: it
    returns ``round(raw2f / 2**fbits)`` by value, so truncation moves toward
    zero and ties-away moves away from zero on negative inputs too.
    """
    if fbits < 0:
        raise ValueError("shift_round needs a non-negative bit count")
    return round_shift_signed(raw2f, fbits, mode)


def raw_product(a: FixedPoint, b: FixedPoint) -> int:
    """Exact integer product carrying 2f fraction bits, no rounding."""
    a._check(b)
    return a.raw * b.raw


def quantize(value: Number, fmt: FixedFormat) -> FixedPoint:
    """Round an int, float, Fraction or FixedPoint into the given format."""
    if isinstance(value, FixedPoint):
        return FixedPoint.from_fraction(value.as_fraction(), fmt)
    if isinstance(value, bool):
        raise TypeError("bool is not a numeric operand")
    if isinstance(value, int):
        return FixedPoint.from_int(value, fmt)
    if isinstance(value, float):
        return FixedPoint.from_float(value, fmt)
    if isinstance(value, Fraction):
        return FixedPoint.from_fraction(value, fmt)
    raise TypeError(f"cannot convert {type(value).__name__} to FixedPoint")
