import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from contlab.errors import ContractError, DimensionError, UnsupportedOrderError
from contlab.fields import FIELD_CATALOG, apply_D, custom_field, divergence, evaluate, make_field, shift_series


def test_catalog_names():
    assert {"damped", "constant", "linear", "rotation2d", "polynomial", "bump", "oscillating"} <= set(FIELD_CATALOG)


def test_unknown_field():
    with pytest.raises(ContractError):
        make_field("vortex")


def test_dimension_check():
    f = make_field("damped")
    with pytest.raises(DimensionError):
        f(0.0, np.zeros((3, 2)))


def test_linear_divergence_is_trace():
    A = np.array([[0.3, -1.0], [2.0, -0.7]])
    f = make_field("linear", matrix=A.tolist())
    x = np.random.default_rng(0).normal(size=(5, 2))
    np.testing.assert_allclose(divergence(f, 0.0, x), np.trace(A), atol=1e-12)
    np.testing.assert_allclose(divergence(f, 0.0, x, method="numeric"), np.trace(A), atol=1e-6)


def test_polynomial_divergence():
    f = make_field("polynomial", coefficients=[0.0, -1.0, 0.0, -1.0])
    x = np.array([[0.5], [-1.2]])
    np.testing.assert_allclose(divergence(f, 0.0, x), -1 - 3 * x[:, 0] ** 2, rtol=1e-12)


@pytest.mark.parametrize("j", [1, 2, 3, 6])
def test_material_derivative_of_position_under_damping(j):
    f = make_field("damped", rate=1.5)
    x = np.array([[0.8]])
    got = apply_D(f, lambda t, u: u[..., 0], 0.0, x, j)
    assert got[0] == pytest.approx((-1.5) ** j * 0.8, rel=1e-12)


def test_numeric_material_derivative_matches_oracle():
    f = make_field("polynomial", coefficients=[0.1, -1.0, 0.3])
    x = np.array([[0.4]])
    fn = lambda t, u: u[..., 0] ** 2
    for j in (1, 2):
        a = apply_D(f, fn, 0.0, x, j)
        b = apply_D(f, fn, 0.0, x, j, method="numeric")
        assert b[0] == pytest.approx(a[0], rel=1e-4)


def test_numeric_order_cap():
    f = custom_field(lambda t, x: -x, 1)
    with pytest.raises(UnsupportedOrderError):
        apply_D(f, lambda t, u: u[..., 0], 0.0, [[1.0]], 5)


def test_time_dependence_enters_material_derivative():
    # D f for f(t, x) = t and v = 0 is 1
    f = make_field("constant", velocity=[0.0])
    assert apply_D(f, lambda t, u: t + 0 * u[..., 0], 0.3, [[1.0]], 1)[0] == pytest.approx(1.0)


def test_shift_series_damped_closed_form():
    g = shift_series(make_field("damped"), [1.0], 0.0, 10)
    assert g(0.1)[0] == pytest.approx(math.exp(-0.1) - 1, abs=1e-12)
    assert g.last_term(0.1) < 1e-15


def test_shift_series_rotation_against_expm():
    f = make_field("rotation2d", omega=2.0)
    x = np.array([0.3, -1.1])
    A = np.array([[0.0, -2.0], [2.0, 0.0]])
    want = expm(0.2 * A) @ x - x
    np.testing.assert_allclose(shift_series(f, x, 0.0, 16)(0.2), want, atol=1e-13)


def test_shift_series_nonlinear_against_ode_solver():
    f = make_field("polynomial", coefficients=[0.0, -1.0, 0.5])
    sol = solve_ivp(lambda t, y: -y + 0.5 * y**2, (0, 0.05), [0.5], rtol=1e-12, atol=1e-14)
    g = shift_series(f, [0.5], 0.0, 12)
    assert g(0.05)[0] == pytest.approx(sol.y[0, -1] - 0.5, abs=1e-11)


def test_shift_series_time_dependent_field_against_ode_solver():
    f = make_field("oscillating", rate=0.5, amplitude=0.8, frequency=3.0)
    sol = solve_ivp(lambda t, y: f(t, y[None])[0], (0.2, 0.25), [0.7], rtol=1e-12, atol=1e-14)
    g = shift_series(f, [0.7], 0.2, 12)
    assert g(0.05)[0] == pytest.approx(sol.y[0, -1] - 0.7, abs=1e-10)


def test_shift_series_is_batched():
    f = make_field("damped", rate=1.0, dim=2)
    x = np.array([[1.0, 2.0], [-1.0, 0.5], [0.0, 0.0]])
    np.testing.assert_allclose(shift_series(f, x, 0.0, 12)(0.1), x * (math.exp(-0.1) - 1), atol=1e-13)


def test_numeric_shift_series_limited_truncation():
    f = custom_field(lambda t, x: -x, 1)
    g = shift_series(f, [1.0], 0.0, 3)
    assert g(0.1)[0] == pytest.approx(-0.1 + 0.005 - 0.1**3 / 6, abs=1e-7)
    with pytest.raises(UnsupportedOrderError):
        shift_series(f, [1.0], 0.0, 8)


def test_bump_vanishes_outside_support():
    f = make_field("bump", center=[0.0], radius=1.0, amplitude=[2.0])
    v = evaluate(f, 0.0, np.array([[1.5], [-1.0], [0.0]]))
    assert v[0, 0] == 0.0 and v[1, 0] == 0.0
    assert v[2, 0] > 0


def test_describe_is_json_friendly():
    import json

    d = make_field("linear", matrix=[[0, 1], [-1, 0]]).describe()
    assert json.loads(json.dumps(d)) == d
