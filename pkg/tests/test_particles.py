import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from contlab.errors import ContractError, DivergenceError
from contlab.fields import custom_field, make_field
from contlab.noise import NoiseSpec
from contlab.particles import (
    Distribution,
    Ensemble,
    SdeSpec,
    integrate_ode,
    integrate_sde,
    ode_trajectories,
    read_ensemble_csv,
    sample_initial,
    sde_trajectories,
    time_grid,
    write_ensemble_csv,
)


def test_time_grid_lands_on_end():
    g = time_grid(0.0, 1.0, 0.3)
    assert g[-1] == 1.0 and g.size == 5
    np.testing.assert_allclose(np.diff(g)[:3], 0.3)


def test_rk4_damped_against_closed_form():
    e = Ensemble(0.0, np.array([[1.0], [-2.0]]))
    out = integrate_ode(make_field("damped"), e, 1.0, 0.01)
    np.testing.assert_allclose(out.positions[:, 0], [math.exp(-1), -2 * math.exp(-1)], atol=1e-10)
    assert out.time == 1.0


def test_rk4_nonlinear_against_scipy():
    f = make_field("polynomial", coefficients=[0.0, -1.0, 0.0, -1.0])
    sol = solve_ivp(lambda t, y: -y - y**3, (0, 1), [1.3], rtol=1e-12, atol=1e-14)
    out = integrate_ode(f, Ensemble(0.0, np.array([[1.3]])), 1.0, 0.001)
    assert out.positions[0, 0] == pytest.approx(sol.y[0, -1], abs=1e-10)


def test_rotation_preserves_radius():
    x0 = sample_initial({"kind": "gaussian", "mean": [0, 0], "cov": [[1, 0], [0, 1]]}, 50, seed=3)
    out = integrate_ode(make_field("rotation2d"), x0, 2 * math.pi, 0.01)
    np.testing.assert_allclose(out.positions, x0.positions, atol=1e-8)


def test_euler_is_first_order():
    f = make_field("damped")
    e = Ensemble(0.0, np.array([[1.0]]))
    errs = [abs(integrate_ode(f, e, 1.0, dt, "euler").positions[0, 0] - math.exp(-1)) for dt in (0.01, 0.005)]
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.02)


def test_trajectories_hit_output_times():
    tr = ode_trajectories(make_field("damped"), Ensemble(0.0, np.ones((3, 1))), 1.0, 0.03,
                          output_times=[0.25, 0.5, 1.0])
    np.testing.assert_array_equal(tr.times, [0.0, 0.25, 0.5, 1.0])
    np.testing.assert_allclose(tr.positions[:, 0, 0], np.exp(-tr.times), atol=1e-8)
    assert tr.index_of(0.5) == 2


def test_blow_up_raises_divergence():
    f = custom_field(lambda t, x: x**2, 1)
    with pytest.raises(DivergenceError), np.errstate(over="ignore", invalid="ignore"):
        integrate_ode(f, Ensemble(0.0, np.array([[2.0]])), 2.0, 0.01)


def test_thread_count_does_not_change_results():
    e = sample_initial({"kind": "gaussian", "mean": [0], "cov": [[1]]}, 10_000, seed=1)
    spec = SdeSpec(make_field("damped"), 0.3, NoiseSpec(seed=5))
    a = integrate_sde(spec, e, 0.5, 0.01, threads=1)
    b = integrate_sde(spec, e, 0.5, 0.01, threads=4)
    np.testing.assert_array_equal(a.positions, b.positions)


def test_zero_diffusion_sde_equals_euler_ode():
    e = sample_initial({"kind": "uniform", "low": [-1], "high": [1]}, 500, seed=2)
    f = make_field("polynomial", coefficients=[0.0, -1.0, 0.3])
    a = integrate_sde(SdeSpec(f, 0.0, NoiseSpec(seed=1)), e, 0.7, 0.01)
    b = integrate_ode(f, e, 0.7, 0.01, "euler")
    np.testing.assert_array_equal(a.positions, b.positions)


def test_brownian_particles_variance():
    n = 100_000
    e = Ensemble(0.0, np.zeros((n, 1)))
    out = integrate_sde(SdeSpec(make_field("constant", velocity=[0.0]), 1.0, NoiseSpec(seed=8)), e, 1.0, 0.05)
    assert abs(out.positions.var() - 1.0) < 5 * math.sqrt(2 / n)


def test_ornstein_uhlenbeck_variance():
    a, s, t, n = 2.0, 0.5, 1.0, 100_000
    out = integrate_sde(SdeSpec(make_field("damped", rate=a), s, NoiseSpec(seed=4)),
                        Ensemble(0.0, np.zeros((n, 1))), t, 0.002)
    want = s**2 / (2 * a) * (1 - math.exp(-2 * a * t))
    # weak Euler bias is O(dt); allow 3 percent plus sampling noise
    assert out.positions.var() == pytest.approx(want, rel=0.03)


def test_noise_origin_shifts_the_process():
    e = Ensemble(1.0, np.zeros((100_000, 1)))
    spec = SdeSpec(make_field("constant", velocity=[0.0]), 1.0, NoiseSpec("poly_brownian", power=2, seed=3),
                   noise_origin=0.0)
    tr = sde_trajectories(spec, e, 1.01, 0.001, output_times=[1.01])
    inc = tr.positions[-1, :, 0]
    # (B + Z)^3 - B^3 with B ~ N(0, 1), Z ~ N(0, d): variance 27 d + 45 d^2 + 15 d^3
    d = 0.01
    assert inc.var() == pytest.approx(27 * d + 45 * d**2 + 15 * d**3, rel=0.1)


def test_sample_initial_deterministic_and_point_cloud():
    d = {"kind": "gaussian", "mean": [1.0, -1.0], "cov": [[1.0, 0.5], [0.5, 2.0]]}
    a = sample_initial(d, 9000, seed=4)
    b = sample_initial(d, 9000, seed=4)
    np.testing.assert_array_equal(a.positions, b.positions)
    pt = sample_initial({"kind": "delta_cloud", "center": [0.5, 0.5]}, 10)
    assert np.all(pt.positions == 0.5)


def test_sample_initial_moments():
    d = Distribution.from_dict({"kind": "delta_cloud", "center": [0, 0], "radius": 1.0})
    e = sample_initial(d, 200_000, seed=7)
    _, cov = d.moments()
    np.testing.assert_allclose(np.cov(e.positions.T), cov, atol=0.005)
    assert np.all(np.linalg.norm(e.positions, axis=1) <= 1.0)


def test_distribution_validation():
    with pytest.raises(ContractError):
        Distribution.from_dict({"kind": "gaussian", "mean": [0]})
    with pytest.raises(ContractError):
        Distribution.from_dict({"kind": "cauchy"})
    with pytest.raises(ContractError):
        sample_initial({"kind": "gaussian", "mean": [0, 0], "cov": [[1, 0], [0, -1]]}, 5)


def test_distribution_round_trip():
    d = {"kind": "uniform", "low": [0.0, -1.0], "high": [1.0, 1.0]}
    assert Distribution.from_dict(d).to_dict() == d


def test_ensemble_csv_round_trip(tmp_path):
    tr = ode_trajectories(make_field("rotation2d"), sample_initial(
        {"kind": "uniform", "low": [0, 0], "high": [1, 1]}, 7, seed=1), 1.0, 0.1, output_times=[0.5, 1.0])
    write_ensemble_csv(tmp_path / "e.csv", tr)
    back = read_ensemble_csv(tmp_path / "e.csv")
    np.testing.assert_array_equal(back.positions, tr.positions)
    text = (tmp_path / "e.csv").read_bytes()
    assert b"\r\n" not in text and text.startswith(b"t,particle_id,x_1,x_2\n")
