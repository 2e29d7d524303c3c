import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import polynomial as P

from contlab.series import Series, series_exp, series_log, series_sincos, series_sqrt

coef = st.floats(-3, 3, allow_nan=False)


def _poly(order):
    return st.lists(coef, min_size=order + 1, max_size=order + 1)


@settings(max_examples=50, deadline=None)
@given(_poly(5), _poly(5))
def test_product_matches_truncated_polymul(a, b):
    got = (Series(a) * Series(b)).c
    want = P.polymul(a, b)[:6]
    np.testing.assert_allclose(got, np.pad(want, (0, 6 - want.size)), atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(_poly(4), _poly(4))
def test_sum_and_difference(a, b):
    np.testing.assert_allclose((Series(a) + Series(b)).c, np.add(a, b))
    np.testing.assert_allclose((Series(a) - Series(b)).c, np.subtract(a, b))


@settings(max_examples=40, deadline=None)
@given(_poly(5), st.floats(0.5, 3))
def test_division_inverts_product(a, c0):
    b = Series([c0, 0.3, -0.2, 0.1, 0.0, 0.05])
    q = (Series(a) * b) / b
    np.testing.assert_allclose(q.c, a, atol=1e-9)


def test_exp_of_line():
    s = Series.line(0.7, 1.0, 6)
    got = series_exp(s).c
    want = [math.exp(0.7) / math.factorial(k) for k in range(7)]
    np.testing.assert_allclose(got, want, rtol=1e-13)


def test_log_inverts_exp():
    s = Series([0.2, 0.5, -0.1, 0.3, 0.0])
    np.testing.assert_allclose(series_log(series_exp(s)).c, s.c, atol=1e-13)


def test_sqrt_squares_back():
    s = Series([4.0, 1.0, 0.5, -0.25])
    r = series_sqrt(s)
    np.testing.assert_allclose((r * r).c, s.c, atol=1e-13)


def test_sqrt_of_negative_leading_term_raises():
    with pytest.raises(ValueError):
        series_sqrt(Series([-1.0, 1.0]))


def test_sincos_of_line():
    sn, cs = series_sincos(Series.line(0.0, 1.0, 5))
    np.testing.assert_allclose(sn.c, [0, 1, 0, -1 / 6, 0, 1 / 120], atol=1e-15)
    np.testing.assert_allclose(cs.c, [1, 0, -1 / 2, 0, 1 / 24, 0], atol=1e-15)


def test_ufuncs_dispatch_to_series():
    s = Series.line(0.3, 1.0, 4)
    np.testing.assert_allclose(np.exp(s).c, series_exp(s).c)
    np.testing.assert_allclose(np.cos(s).c, series_sincos(s)[1].c)
    np.testing.assert_allclose(np.square(s).c, (s * s).c)


def test_derivative_evaluate_and_integral():
    s = Series([1.0, 2.0, 3.0, 4.0])
    assert s.derivative(3) == pytest.approx(24.0)
    assert s.evaluate(0.5) == pytest.approx(1 + 1 + 0.75 + 0.5)
    np.testing.assert_allclose(s.integral().c, [0, 1, 1, 1])


def test_vector_series_indexing_and_sum():
    c = np.arange(12.0).reshape(3, 2, 2)
    s = Series(c)
    assert s.shape == (2, 2)
    np.testing.assert_array_equal(s[0, 1].c, c[:, 0, 1])
    np.testing.assert_array_equal(s.sum(axis=-1).c, c.sum(axis=-1))


def test_comparisons_are_refused():
    with pytest.raises(TypeError):
        Series([1.0, 2.0]) < 3
