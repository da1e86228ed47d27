"""Rounding modes and the integer rounding primitives shared by all scalar types.

Every rounding decision in the toolkit funnels through the two helpers in
this module, so the tie-breaking rules live in exactly one place:

* RNE - round to nearest, ties to the even quotient
* RTZ - truncate toward zero (magnitude truncation, sign-independent)
* RNA - round to nearest, ties away from zero
"""

from __future__ import annotations

import enum


class RoundingMode(enum.Enum):
    RNE = "rne"
    RTZ = "rtz"
    RNA = "rna"

    @classmethod
    def parse(cls, name: str) -> "RoundingMode":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown rounding mode {name!r}; expected one of rne, rtz, rna") from None

    def __str__(self) -> str:
        return self.value


def round_shift(mag: int, shift: int, mode: RoundingMode) -> int:
    """Round the non-negative integer ``mag / 2**shift`` to an integer.

    Operates on magnitudes; callers reattach the sign, which makes RTZ
    truncation and RNA away-from-zero symmetric in the value (not the bit
    pattern).
    """
    if mag < 0:
        raise ValueError("round_shift expects a non-negative magnitude")
    if shift <= 0:
        return mag << -shift
    q = mag >> shift
    rem = mag - (q << shift)
    if rem == 0:
        return q
    if mode is RoundingMode.RTZ:
        return q
    half = 1 << (shift - 1)
    if rem > half:
        return q + 1
    if rem < half:
        return q
    # exact tie
    if mode is RoundingMode.RNA:
        return q + 1
    return q + (q & 1)


def round_ratio(num: int, den: int, mode: RoundingMode) -> int:
    """Round the non-negative rational ``num / den`` to an integer."""
    if num < 0 or den <= 0:
        raise ValueError("round_ratio expects num >= 0 and den > 0")
    q, rem = divmod(num, den)
    if rem == 0:
        return q
    if mode is RoundingMode.RTZ:
        return q
    twice = 2 * rem
    if twice > den:
        return q + 1
    if twice < den:
        return q
    if mode is RoundingMode.RNA:
        return q + 1
    return q + (q & 1)


def round_shift_signed(value: int, shift: int, mode: RoundingMode) -> int:
    """Signed wrapper around :func:`round_shift`, rounding by value."""
    if value < 0:
        return -round_shift(-value, shift, mode)
    return round_shift(value, shift, mode)


def round_ratio_signed(num: int, den: int, mode: RoundingMode) -> int:
    """Signed wrapper around :func:`round_ratio`; ``den`` must be positive."""
    if num < 0:
        return -round_ratio(-num, den, mode)
    return round_ratio(num, den, mode)
