import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from ulamcert.rigor import (
    Interval,
    Observable,
    Poly,
    integrate_uniform_cells,
    iv_integrate_cell,
    iv_pow,
    iv_sqrt,
    parse_observable,
    parse_polynomial,
    sum_upper,
    vadd,
    vmul,
    vmul_tight,
    vsum,
)

finite = st.floats(min_value=-1e30, max_value=1e30, allow_nan=False, allow_infinity=False, allow_subnormal=True)
unit = st.fractions(min_value=0, max_value=1, max_denominator=10**6)


@st.composite
def interval_with_point(draw):
    a, b = sorted((draw(finite), draw(finite)))
    t = draw(unit)
    x = Fraction(a) + t * (Fraction(b) - Fraction(a))
    return Interval(a, b), x


def encloses(iv: Interval, value: Fraction) -> bool:
    lo_ok = iv.lo == -math.inf or Fraction(iv.lo) <= value
    hi_ok = iv.hi == math.inf or value <= Fraction(iv.hi)
    return lo_ok and hi_ok


@settings(max_examples=10_000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(interval_with_point(), interval_with_point())
def test_sampled_points_stay_inside(xp, yp):
    (X, x), (Y, y) = xp, yp
    assert encloses(X + Y, x + y)
    assert encloses(X - Y, x - y)
    assert encloses(X * Y, x * y)
    if not (Y.lo <= 0.0 <= Y.hi):
        assert encloses(X / Y, x / y)
    if X.lo >= 0:
        s = iv_sqrt(X)
        assert Fraction(s.lo) ** 2 <= x <= Fraction(s.hi) ** 2
    assert encloses(iv_pow(X, 2), x * x)
    assert encloses(iv_pow(X, 3), x**3)


@st.composite
def nested(draw):
    a, b = sorted((draw(finite), draw(finite)))
    grow_lo, grow_hi = draw(st.floats(0, 1e3)), draw(st.floats(0, 1e3))
    inner = Interval(a, b)
    outer = Interval(a - grow_lo, b + grow_hi)
    return inner, outer


@settings(max_examples=2000, deadline=None)
@given(nested(), nested())
def test_containment_is_monotone(xs, ys):
    (X, X2), (Y, Y2) = xs, ys
    assert X2.contains(X) and Y2.contains(Y)
    for op in (lambda a, b: a + b, lambda a, b: a - b, lambda a, b: a * b):
        assert op(X2, Y2).contains(op(X, Y))
    if not (Y2.lo <= 0.0 <= Y2.hi):
        assert (X2 / Y2).contains(X / Y)


def test_underflow_and_overflow_stay_sound():
    tiny = Interval(0.0, 2.47892604002259e-131)
    assert tiny.hi > 0 and (tiny * tiny).hi > 0 and iv_pow(tiny, 3).hi > 0
    neg = Interval(-2.564460215772214e-234, 0.0)
    assert (tiny * neg).lo < 0
    assert iv_pow(Interval(-5.7597984237379806e-216, 0.0), 2).hi > 0
    q = Interval(1e-300) / Interval(1e300)
    assert q.lo <= 0 < q.hi
    assert (Interval(6.5e8) / Interval(3.6e-300)).hi == math.inf
    lo, hi = vmul_tight(np.array([1e-200, 0.0, 3.0]), np.array([1e-200, 5.0, 0.5]))
    assert lo[0] <= 0 < hi[0] and lo[1] == hi[1] == 0.0 and lo[2] == hi[2] == 1.5


def test_exact_rationals_are_tight():
    third = Interval.exact(Fraction(1, 3))
    assert third.lo < third.hi == math.nextafter(third.lo, 1.0)
    assert Interval.exact("0.5") == Interval(0.5, 0.5)
    assert Interval.exact(Fraction(1, 3)).contains(Fraction(1, 3))


def test_division_by_zero_interval_raises():
    with pytest.raises(ZeroDivisionError):
        Interval(1.0) / Interval(-1.0, 1.0)


def test_empty_interval_rejected():
    with pytest.raises(ValueError):
        Interval(1.0, 0.0)


def test_one_tenth_sum_is_enclosed():
    acc = Interval(0.0)
    for _ in range(10):
        acc = acc + Interval.exact(Fraction(1, 10))
    assert acc.contains(1)
    assert acc.width < 1e-14


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.fractions(min_value=-4, max_value=4, max_denominator=50), min_size=1, max_size=5),
    st.fractions(min_value=0, max_value=1, max_denominator=997),
    st.fractions(min_value=0, max_value=1, max_denominator=997),
    st.fractions(min_value=0, max_value=1, max_denominator=997),
)
def test_cell_integral_is_additive(coeffs, p, q, r):
    a, b, c = sorted((p, q, r))
    if a == c:
        return
    phi = Observable.polynomial(coeffs)
    whole = iv_integrate_cell(phi, Interval.exact(a).hull(Interval.exact(c)))
    parts = iv_integrate_cell(phi, Interval.exact(a).hull(Interval.exact(b))) + iv_integrate_cell(
        phi, Interval.exact(b).hull(Interval.exact(c))
    )
    exact = Poly(coeffs).antiderivative()
    value = exact.eval_exact(c) - exact.eval_exact(a)
    slack = 4 * math.ulp(max(1.0, abs(float(value))))
    assert whole.intersects(Interval(parts.lo - slack, parts.hi + slack))
    if a.denominator & (a.denominator - 1) == 0 and c.denominator & (c.denominator - 1) == 0:
        assert encloses(whole, value)


@pytest.mark.parametrize("d", [2, 16, 1024])
def test_uniform_cell_integrals_enclose_exact_values(d):
    phi = parse_observable("x^3 - 2x on [0,1/3]; 1/2 on [1/3,1]")
    lo, hi = integrate_uniform_cells(phi, d)
    for k in range(d):
        a, b = Fraction(k, d), Fraction(k + 1, d)
        exact = Fraction(0)
        for pc in phi.pieces:
            u, v = max(a, pc.left), min(b, pc.right)
            if u < v:
                F = pc.poly.antiderivative()
                exact += F.eval_exact(v) - F.eval_exact(u)
        assert Fraction(lo[k]) <= exact <= Fraction(hi[k])


def test_observable_bounds():
    psi = parse_observable("x^2")
    assert psi.sup_norm_bound.contains(1)
    assert psi.var_bound.contains(1)
    assert psi.var_bound.hi <= 1 + 1e-12
    step = Observable([((0, Fraction(1, 2)), [1]), ((Fraction(1, 2), 1), [-2])])
    assert step.var_bound.contains(3)
    with pytest.raises(ValueError):
        Observable([((0, Fraction(1, 2)), [1])])


def test_polynomial_parser():
    assert parse_polynomial("2x + 1/2 x^2 - 3") == [Fraction(-3), Fraction(2), Fraction(1, 2)]
    assert parse_polynomial("(x-1)^2") == [Fraction(1), Fraction(-2), Fraction(1)]
    assert parse_polynomial("x**3") == [0, 0, 0, 1]
    with pytest.raises(ValueError):
        parse_polynomial("x +")


def test_array_helpers_enclose():
    rng = np.random.default_rng(3)
    a = rng.uniform(-1, 1, 500)
    b = rng.uniform(-1, 1, 500)
    lo, hi = vadd(a, a, b, b)
    assert all(Fraction(l) <= Fraction(x) + Fraction(y) <= Fraction(h) for l, h, x, y in zip(lo, hi, a, b))
    lo, hi = vmul(a, a, b, b)
    assert all(Fraction(l) <= Fraction(x) * Fraction(y) <= Fraction(h) for l, h, x, y in zip(lo, hi, a, b))
    exact = sum(Fraction(x) for x in a)
    s = vsum(a, a)
    assert Fraction(s.lo) <= exact <= Fraction(s.hi)
    assert Fraction(sum_upper(np.abs(a))) >= sum(abs(Fraction(x)) for x in a)
