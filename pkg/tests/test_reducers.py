"""Reducer and dot product tests.

Frozen expectations were computed with exact-rational reference
implementations (tests/oracles.py and the derivation script they feed);
the package code never produced them.
"""

from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certinfer.errors import InvalidOperationError, UnsupportedModeError
from certinfer.fixedpoint import FixedFormat, FixedPoint
from certinfer.reducers import (
    SUM_REDUCERS,
    ExactAccumulator,
    dot_fixed_accurate,
    dot_fixed_naive,
    dot_float_naive,
    dot_float_oro,
    sum_exact,
    sum_kn,
    sum_naive,
    sum_pairwise,
    two_product,
    two_sum,
)
from certinfer.rounding import RoundingMode
from certinfer.softfloat import SoftFloat

from oracles import is_representable, oracle_pairwise, oracle_round

RNE = RoundingMode.RNE
RTZ = RoundingMode.RTZ


def sf(x, p=8, mode=RNE):
    return SoftFloat.from_fraction(Fraction(x), p, mode)


def test_tie_absorption_case():
    # p=8 RNE: adding eight 1s to 256 one at a time never moves the total
    vals = [sf(256)] + [sf(1)] * 8
    zero = SoftFloat.zero(8, RNE)
    assert sum_naive(vals, zero).as_fraction() == 256
    assert sum_pairwise(vals, zero).as_fraction() == 262
    assert sum_kn(vals, zero).as_fraction() == 264
    assert sum_exact(vals, zero).as_fraction() == 264


def test_cancellation_case():
    # p=11 RNE: 1e4 + pi - 1e4; compensation recovers the absorbed term
    vals = [sf(10000, 11), SoftFloat.from_decimal("3.14159", 11, RNE), sf(-10000, 11)]
    zero = SoftFloat.zero(11, RNE)
    assert sum_naive(vals, zero).is_zero
    assert sum_pairwise(vals, zero).is_zero
    assert sum_kn(vals, zero).as_fraction() == Fraction(201, 64)
    assert sum_exact(vals, zero).as_fraction() == Fraction(201, 64)


def test_truncation_drift_case():
    # p=6 RTZ: every naive add truncates the 0.75 away completely
    vals = [sf(64, 6, RTZ)] + [sf(Fraction(3, 4), 6, RTZ)] * 12
    zero = SoftFloat.zero(6, RTZ)
    assert sum_naive(vals, zero).as_fraction() == 64
    assert sum_pairwise(vals, zero).as_fraction() == 70
    assert sum_kn(vals, zero).as_fraction() == 72
    assert sum_exact(vals, zero).as_fraction() == 72


def test_compensated_dot_recovers_cancellation():
    # p=8 RNE: products cancel at 1000 and leave 1 + 2**-7
    xs = [sf(1000), sf(1), sf(-1000), sf(Fraction(1, 128))]
    ys = [sf(1)] * 4
    zero = SoftFloat.zero(8, RNE)
    assert dot_float_naive(xs, ys, zero).as_fraction() == Fraction(1, 128)
    assert dot_float_oro(xs, ys, zero).as_fraction() == Fraction(129, 128)


def test_fixed_dot_witness():
    # f=1 RNE with raws [1, 1]: per-product rounding loses everything
    fmt = FixedFormat(fbits=1, mode=RNE)
    xs = [FixedPoint(1, fmt), FixedPoint(1, fmt)]
    zero = FixedPoint.zero(fmt)
    assert dot_fixed_naive(xs, xs, zero).raw == 0
    assert dot_fixed_accurate(xs, xs, zero).raw == 1
    assert dot_fixed_accurate(xs, xs, zero).to_decimal() == "0.5"


def test_fixed_dot_truncation_drift():
    fmt = FixedFormat(fbits=2, mode=RTZ)
    xs = [FixedPoint(3, fmt)] * 4
    zero = FixedPoint.zero(fmt)
    assert dot_fixed_naive(xs, xs, zero).raw == 8
    assert dot_fixed_accurate(xs, xs, zero).raw == 9


def test_empty_reductions_return_the_zero():
    zero = SoftFloat.zero(8, RNE)
    for name, fn in SUM_REDUCERS.items():
        assert fn([], zero).is_zero, name
    assert dot_float_naive([], [], zero).is_zero
    assert dot_float_oro([], [], zero).is_zero
    fzero = FixedPoint.zero(FixedFormat(fbits=2, mode=RNE))
    assert dot_fixed_naive([], [], fzero).is_zero
    assert dot_fixed_accurate([], [], fzero).is_zero


def test_dot_length_mismatch_rejected():
    zero = SoftFloat.zero(8, RNE)
    with pytest.raises(ValueError):
        dot_float_naive([sf(1)], [], zero)
    with pytest.raises(ValueError):
        dot_float_oro([sf(1)], [sf(1), sf(2)], zero)


def test_eft_requires_nearest_even():
    a = sf(3, 8, RTZ)
    with pytest.raises(UnsupportedModeError):
        two_sum(a, a)
    with pytest.raises(UnsupportedModeError):
        two_product(a, a)
    with pytest.raises(UnsupportedModeError):
        dot_float_oro([a], [a], SoftFloat.zero(8, RTZ))


def test_exact_accumulator_rejects_infinity():
    inf = SoftFloat.infinity(False, 8, RNE)
    acc = ExactAccumulator()
    with pytest.raises(InvalidOperationError):
        acc.add(inf)


def _plain_kahan(values, zero):
    """Classic compensated loop, correction folded into every step.

    Test-only reference showing why the shipped reducer uses the improved
    variant: when a summand exceeds the running total in magnitude, this
    version loses the correction.
    """
    total = zero
    comp = zero
    for v in values:
        y = v - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def test_absorption_case_p53():
    vals = [sf(10**16, 53), sf(1, 53), sf(-(10**16), 53)]
    zero = SoftFloat.zero(53, RNE)
    assert sum_naive(vals, zero).is_zero
    assert _plain_kahan(vals, zero).is_zero  # classic variant also fails here
    assert sum_kn(vals, zero).as_fraction() == 1
    assert sum_exact(vals, zero).as_fraction() == 1


def test_two_sum_absorption_example():
    a, b = sf(10**16, 53), sf(1, 53)
    s, e = two_sum(a, b)
    assert s == a and e == b


def test_dot_of_large_square():
    # 16777215**2 needs 48 bits; every algorithm must return it rounded to 24
    x = sf(16777215, 24)
    zero = SoftFloat.zero(24, RNE)
    expected = oracle_round(Fraction(16777215) ** 2, 24, "rne")
    assert dot_float_naive([x], [x], zero).as_fraction() == expected
    assert dot_float_oro([x], [x], zero).as_fraction() == expected
    assert dot_float_naive([x], [x], zero, sum_exact).as_fraction() == expected


def test_dot_against_zeros():
    zero = SoftFloat.zero(16, RNE)
    xs = [sf(v, 16) for v in (3, -7, 11)]
    zs = [SoftFloat.zero(16, RNE)] * 3
    assert dot_float_naive(xs, zs, zero).is_zero
    assert dot_float_oro(xs, zs, zero).is_zero
    fmt = FixedFormat(fbits=4, mode=RNE)
    fxs = [FixedPoint(r, fmt) for r in (5, -3, 2)]
    fzs = [FixedPoint.zero(fmt)] * 3
    assert dot_fixed_naive(fxs, fzs, FixedPoint.zero(fmt)).is_zero
    assert dot_fixed_accurate(fxs, fzs, FixedPoint.zero(fmt)).is_zero


def test_fixed_naive_error_grows_linearly():
    """Witness family: RTZ drops almost a full 2**-f per product, so the
    naive dot error approaches n * 2**-f while the accurate dot stays
    within a single rounding."""
    f = 4
    fmt = FixedFormat(fbits=f, mode=RoundingMode.RTZ)
    step = Fraction(1, 2**f)
    for n in (4, 16, 64):
        xs = [FixedPoint(1, fmt)] * n
        ys = [FixedPoint(2**f - 1, fmt)] * n
        exact = sum(x.as_fraction() * y.as_fraction() for x, y in zip(xs, ys))
        naive_err = abs(dot_fixed_naive(xs, ys, FixedPoint.zero(fmt)).as_fraction() - exact)
        acc_err = abs(dot_fixed_accurate(xs, ys, FixedPoint.zero(fmt)).as_fraction() - exact)
        assert acc_err <= step
        assert naive_err >= n * step * Fraction(2**f - 1, 2**f)
        assert naive_err <= n * step


def test_accuracy_ordering_on_ill_conditioned_data():
    """Median absolute error over seeded ill-conditioned sums must order
    exact <= compensated <= {pairwise, naive}."""
    import random

    rng = random.Random(20260815)
    p = 16
    zero = SoftFloat.zero(p, RNE)
    errors = {"naive": [], "pairwise": [], "kn": [], "exact": []}
    for _ in range(40):
        big = [Fraction(rng.randint(2**14, 2**16)) for _ in range(12)]
        small = [Fraction(rng.randint(1, 2**10), 2**12) for _ in range(12)]
        parts = big + [-b for b in big] + small
        rng.shuffle(parts)
        vals = [SoftFloat.from_fraction(v, p, RNE) for v in parts]
        exact = sum((v.as_fraction() for v in vals), Fraction(0))
        for name in errors:
            got = SUM_REDUCERS[name](vals, zero).as_fraction()
            errors[name].append(abs(got - exact))

    def median(xs):
        xs = sorted(xs)
        return xs[len(xs) // 2]

    m = {name: median(errs) for name, errs in errors.items()}
    assert m["exact"] <= m["kn"] <= m["pairwise"]
    assert m["exact"] <= m["kn"] <= m["naive"]


@pytest.mark.slow
def test_eft_bulk_random_exactness():
    """Spec-scale randomized EFT exactness: 1e5 pairs per precision."""
    import random

    rng = random.Random(7)
    for p in (11, 24, 53):
        for _ in range(100_000):
            fa = Fraction(rng.getrandbits(p) + 1, 1 << rng.randint(0, p)) * rng.choice((1, -1))
            fb = Fraction(rng.getrandbits(p) + 1, 1 << rng.randint(0, p)) * rng.choice((1, -1))
            a = SoftFloat.from_fraction(fa, p, RNE)
            b = SoftFloat.from_fraction(fb, p, RNE)
            s, e = two_sum(a, b)
            assert s.as_fraction() + e.as_fraction() == a.as_fraction() + b.as_fraction()
            pr, pe = two_product(a, b)
            assert pr.as_fraction() + pe.as_fraction() == a.as_fraction() * b.as_fraction()


fractions_st = st.fractions(
    min_value=Fraction(-(2**20)), max_value=Fraction(2**20), max_denominator=2**20
)


@given(
    st.lists(fractions_st, max_size=16),
    st.randoms(use_true_random=False),
    st.integers(min_value=2, max_value=24),
)
def test_exact_sum_permutation_invariant(fs, rnd, p):
    vals = [SoftFloat.from_fraction(f, p, RNE) for f in fs]
    zero = SoftFloat.zero(p, RNE)
    shuffled = list(vals)
    rnd.shuffle(shuffled)
    assert sum_exact(vals, zero) == sum_exact(shuffled, zero)


@given(fractions_st, fractions_st, st.integers(min_value=2, max_value=24))
def test_two_sum_identity(fa, fb, p):
    a = SoftFloat.from_fraction(fa, p, RNE)
    b = SoftFloat.from_fraction(fb, p, RNE)
    s, e = two_sum(a, b)
    assert s.as_fraction() + e.as_fraction() == a.as_fraction() + b.as_fraction()
    assert s == a + b
    assert is_representable(e.as_fraction(), p)


@given(fractions_st, fractions_st, st.integers(min_value=2, max_value=24))
def test_two_product_identity(fa, fb, p):
    a = SoftFloat.from_fraction(fa, p, RNE)
    b = SoftFloat.from_fraction(fb, p, RNE)
    prod, e = two_product(a, b)
    assert prod.as_fraction() + e.as_fraction() == a.as_fraction() * b.as_fraction()
    assert prod == a * b
    assert is_representable(e.as_fraction(), p)


@given(st.lists(fractions_st, max_size=20), st.integers(min_value=2, max_value=24))
def test_exact_sum_is_correctly_rounded(fs, p):
    vals = [SoftFloat.from_fraction(f, p, RNE) for f in fs]
    zero = SoftFloat.zero(p, RNE)
    exact = sum((v.as_fraction() for v in vals), Fraction(0))
    assert sum_exact(vals, zero).as_fraction() == oracle_round(exact, p, "rne")


@given(st.lists(fractions_st, min_size=1, max_size=17), st.integers(min_value=3, max_value=16))
@settings(max_examples=150)
def test_pairwise_split_shape(fs, p):
    """The recursion must put the extra element in the left block."""
    vals = [SoftFloat.from_fraction(f, p, RNE) for f in fs]
    zero = SoftFloat.zero(p, RNE)
    expected = oracle_pairwise(list(vals), lambda a, b: a + b)
    if len(vals) == 1:
        expected = zero + expected
    assert sum_pairwise(vals, zero) == expected


@given(st.lists(st.integers(min_value=-500, max_value=500), max_size=20))
def test_fixed_sum_reducers_all_agree(raws):
    """Fixed addition is exact, so every reducer returns the same value."""
    fmt = FixedFormat(fbits=3, mode=RNE, mbits=20)
    vals = [FixedPoint(r, fmt) for r in raws]
    zero = FixedPoint.zero(fmt)
    results = {name: fn(vals, zero).raw for name, fn in SUM_REDUCERS.items()}
    assert len(set(results.values())) == 1


@given(st.lists(st.tuples(fractions_st, fractions_st), max_size=12))
def test_oro_error_bound(pairs):
    """Compensated dot satisfies |result - exact| <= u|exact| + 2*g**2*S
    where u is the unit roundoff, g = nu/(1 - nu) and S = sum |x_i y_i|."""
    p = 20
    xs = [SoftFloat.from_fraction(a, p, RNE) for a, _ in pairs]
    ys = [SoftFloat.from_fraction(b, p, RNE) for _, b in pairs]
    zero = SoftFloat.zero(p, RNE)
    got = dot_float_oro(xs, ys, zero)
    exact = sum((x.as_fraction() * y.as_fraction() for x, y in zip(xs, ys)), Fraction(0))
    absum = sum((abs(x.as_fraction() * y.as_fraction()) for x, y in zip(xs, ys)), Fraction(0))
    u = Fraction(1, 2**p)
    n = max(len(pairs), 1)
    gamma = Fraction(2 * n * u.numerator, u.denominator - 2 * n * u.numerator)
    assert abs(got.as_fraction() - exact) <= u * abs(exact) + 2 * gamma * gamma * absum
