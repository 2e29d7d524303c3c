import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from contlab.analysis import (
    concentration_check,
    density_mode_detection,
    detect_scaling,
    detect_stochasticity,
    dt_ladder_check,
    dual_expansion_check,
    fit_order,
    gaussian_transport,
    histogram_run,
    moment_expansion_check,
    reynolds_check,
)
from contlab.density import GridSpec, analytic_gaussian
from contlab.errors import BinningError, ContractError
from contlab.fields import make_field
from contlab.noise import NoiseSpec
from contlab.particles import SdeSpec, Trajectories, ode_trajectories, sample_initial, sde_trajectories
from contlab.transport import solve_fokker_planck

DAMPED = make_field("damped")
G1 = {"kind": "gaussian", "mean": [1.0], "cov": [[0.04]]}


@pytest.fixture(scope="module")
def start():
    return sample_initial(G1, 20_000, seed=11)


def _outs(t0, n, dt=0.001):
    return list(t0 + dt * np.arange(1, n + 1))


def test_fit_order_on_power_law():
    x = np.array([0.4, 0.2, 0.1])
    assert fit_order(x, 3 * x**2.5) == pytest.approx(2.5)


def test_gaussian_transport_against_moment_odes():
    A = np.array([[-0.5, 1.0], [-1.0, -0.2]])
    b = np.array([0.3, 0.0])
    f = make_field("linear", matrix=A.tolist(), offset=b.tolist())
    m0, C0 = np.array([1.0, -1.0]), np.array([[0.2, 0.05], [0.05, 0.1]])

    def rhs(t, y):
        m, C = y[:2], y[2:].reshape(2, 2)
        return np.concatenate([A @ m + b, (A @ C + C @ A.T).ravel()])

    sol = solve_ivp(rhs, (0, 0.7), np.concatenate([m0, C0.ravel()]), rtol=1e-12, atol=1e-14)
    m, C = gaussian_transport(f, m0, C0, 0.0, 0.7)
    np.testing.assert_allclose(m, sol.y[:2, -1], atol=1e-10)
    np.testing.assert_allclose(C, sol.y[2:, -1].reshape(2, 2), atol=1e-10)


def test_concentration_orders():
    smooth = concentration_check(lambda u: np.cos(u.sum(axis=-1)), [0.3, -0.2], [0.2, 0.1, 0.05])
    assert smooth.passed and smooth.fitted_order == pytest.approx(2.0, abs=0.05)
    affine = concentration_check(lambda u: 3 * u[..., 0] + 1, [0.3], [0.2, 0.1, 0.05])
    assert affine.passed and max(affine.quantities) < 1e-12


def test_concentration_rejects_bound_violation():
    with pytest.raises(ContractError):
        concentration_check(lambda u: (u * u).sum(axis=-1), [0.0], [1.0, 0.5], bound=1.0)


def test_moment_expansion_nonlinear_field():
    f = make_field("polynomial", coefficients=[0.0, -1.0, 0.5])
    rep = moment_expansion_check(f, [0.5], [0.2, 0.1, 0.05], 0.01, truncation=12)
    # the mean deviation is a genuine o(sigma^2) effect here, not a numerical floor
    assert rep.mean.fitted_order == pytest.approx(2.0, abs=0.1)
    assert rep.cross_pass


def test_moment_expansion_particle_mode():
    rep = moment_expansion_check(DAMPED, [1.0], [0.2, 0.1], 0.01, mode="particles", n_particles=50_000)
    # the flow is linear, so particle means follow the shift series exactly
    assert max(rep.mean.quantities) < 1e-10
    assert rep.cross_pass


def test_moment_expansion_guards_truncation():
    with pytest.raises(ContractError):
        moment_expansion_check(make_field("polynomial", coefficients=[0.0, -1.0, 0.5]), [1.0], [0.1], 0.5,
                               truncation=3)


def test_dt_ladder_second_order():
    rep = dt_ladder_check(DAMPED, [1.0], 0.1, [0.02, 0.01, 0.005])
    assert rep.passed and rep.fitted_order >= 1.8


def test_dual_expansion_constant_function_is_trivial():
    out = dual_expansion_check(DAMPED, lambda t, u: u[..., 0] * 0 + 7.0, [1.0], 0.1, 0.01)
    assert out["pass"]
    assert all(abs(o["right"]) < 1e-12 for o in out["orders"])


def test_dual_expansion_limits():
    with pytest.raises(ContractError):
        dual_expansion_check(DAMPED, lambda t, u: u[..., 0], [1.0], 0.1, 0.01, max_order=3)


def test_reynolds_rotation_two_dimensional():
    dist = {"kind": "gaussian", "mean": [1.0, 0.0], "cov": [[0.05, 0.0], [0.0, 0.05]]}
    grid = ((-3, 3, 60), (-3, 3, 60))
    coarse, fine = (reynolds_check(make_field("rotation2d"), dist, 50_000, 0.5, grid, seed=3, pde_refine=r)
                    for r in (2, 4))
    assert fine.l1_analytic < 0.1
    # upwind smearing dominates the PDE side in 2D and shrinks under refinement
    assert coarse.l1_pde / fine.l1_pde > 1.5


def test_detector_needs_enough_trajectories(start):
    tr = ode_trajectories(DAMPED, sample_initial(G1, 100, seed=1), 0.01, 0.001, output_times=_outs(0, 10))
    with pytest.raises(ContractError):
        detect_stochasticity(tr, DAMPED, 0.01)


def test_detector_spacing_rule(start):
    tr = ode_trajectories(DAMPED, start, 0.01, 0.005, output_times=[0.005, 0.01])
    with pytest.raises(ContractError):
        detect_stochasticity(tr, DAMPED, 0.01)


def test_detector_binning_error_suggests_width(start):
    tr = ode_trajectories(DAMPED, start, 0.01, 0.001, output_times=_outs(0, 10))
    with pytest.raises(BinningError) as exc:
        detect_stochasticity(tr, DAMPED, 0.01, min_count=400)
    assert exc.value.suggested_width[0] > 0.02 * 0.2


def test_detector_deterministic_and_stochastic(start):
    ode = ode_trajectories(DAMPED, start, 0.01, 0.001, output_times=_outs(0, 10))
    sde = sde_trajectories(SdeSpec(DAMPED, 0.2, NoiseSpec(seed=3)), start, 0.01, 0.001, output_times=_outs(0, 10))
    v0 = detect_stochasticity(ode, DAMPED, 0.01)
    v1 = detect_stochasticity(sde, DAMPED, 0.01)
    assert v0.decision == "deterministic"
    assert v1.decision == "stochastic"
    assert v1.rate == pytest.approx(0.04, rel=0.1)
    lotv = v1.to_dict()["law_of_total_variance"]
    assert lotv["total"] == pytest.approx(lotv["expected_conditional_variance"]
                                          + lotv["variance_of_conditional_means"], rel=1e-9)


def test_wrong_hypothesis_needs_twin_calibration(start):
    # a misspecified drift varies across a bin; the sigma = 0 twin on identical settings absorbs that
    wrong = make_field("damped", rate=2.0)
    ode = ode_trajectories(DAMPED, start, 0.01, 0.001, output_times=_outs(0, 10))
    sde = sde_trajectories(SdeSpec(DAMPED, 0.2, NoiseSpec(seed=3)), start, 0.01, 0.001, output_times=_outs(0, 10))
    v_ode = detect_stochasticity(ode, wrong, 0.01, calibration=ode)
    v_sde = detect_stochasticity(sde, wrong, 0.01, calibration=ode)
    assert v_ode.decision == "deterministic"
    assert v_ode.mean_shift_check > 1e-3
    assert v_sde.decision == "stochastic"
    assert v_sde.rate == pytest.approx(0.04, rel=0.1)


def test_brownian_scaling_is_flat(start):
    sde = sde_trajectories(SdeSpec(DAMPED, 0.2, NoiseSpec(seed=5)), start, 0.04, 0.001, output_times=_outs(0, 40))
    s = detect_scaling(sde, DAMPED, [0.01, 0.02, 0.04], n_boot=50, seed=1)
    assert not s.non_brownian
    assert abs(s.slope) < 0.25


def test_density_mode_detection():
    e0 = sample_initial(G1, 100_000, seed=11)
    outs = [0.09, 0.1, 0.11]
    ode = ode_trajectories(DAMPED, e0, 0.11, 0.001, output_times=outs)
    ode = Trajectories(ode.times[1:], ode.positions[1:])
    runs = [histogram_run(ode, ((-2, 3, n),)) for n in (100, 200)]
    assert density_mode_detection(runs, DAMPED, time=0.1)["decision"] == "deterministic"
    fp = [solve_fokker_planck(DAMPED, 0.3, analytic_gaussian([1.0], [[0.04]], GridSpec(((-2, 3, n),))), 0.11,
                              output_times=outs) for n in (100, 200, 400)]
    assert density_mode_detection(fp, DAMPED, time=0.1)["decision"] == "stochastic"
