from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from certinfer.rounding import (
    RoundingMode,
    round_ratio,
    round_ratio_signed,
    round_shift,
    round_shift_signed,
)


def test_mode_parsing():
    assert RoundingMode.parse("RNE") is RoundingMode.RNE
    assert RoundingMode.parse(" rtz ") is RoundingMode.RTZ
    with pytest.raises(ValueError):
        RoundingMode.parse("nearest")
    assert str(RoundingMode.RNA) == "rna"


def test_round_shift_rejects_negative_magnitude():
    with pytest.raises(ValueError):
        round_shift(-1, 2, RoundingMode.RNE)


def test_round_ratio_validates():
    with pytest.raises(ValueError):
        round_ratio(-1, 3, RoundingMode.RNE)
    with pytest.raises(ValueError):
        round_ratio(1, 0, RoundingMode.RNE)


@given(
    st.integers(min_value=0, max_value=2**48),
    st.integers(min_value=0, max_value=20),
    st.sampled_from(list(RoundingMode)),
)
def test_round_shift_agrees_with_round_ratio(mag, shift, mode):
    assert round_shift(mag, shift, mode) == round_ratio(mag, 1 << shift, mode)


@given(
    st.integers(min_value=-(2**48), max_value=2**48),
    st.integers(min_value=1, max_value=2**20),
    st.sampled_from(list(RoundingMode)),
)
def test_signed_ratio_error_bounds(num, den, mode):
    got = round_ratio_signed(num, den, mode)
    err = Fraction(got) - Fraction(num, den)
    if mode is RoundingMode.RTZ:
        assert abs(got) <= abs(Fraction(num, den))
        assert abs(err) < 1
    else:
        assert abs(err) <= Fraction(1, 2)


@given(st.integers(min_value=-(2**48), max_value=2**48), st.integers(min_value=0, max_value=24))
def test_signed_shift_symmetry(value, shift):
    for mode in RoundingMode:
        assert round_shift_signed(-value, shift, mode) == -round_shift_signed(value, shift, mode)


def test_left_shift_is_exact():
    assert round_shift(5, -3, RoundingMode.RTZ) == 40
    assert round_shift_signed(-5, -3, RoundingMode.RNE) == -40
