import numpy as np
import pytest
from scipy.stats import norm

from contlab.density import (
    DensityGrid,
    GridSpec,
    analytic_gaussian,
    histogram,
    initial_density,
    kde,
    l1_distance,
    moments,
    read_density,
    write_density,
)
from contlab.errors import ContractError, DimensionError, StaleGridError
from contlab.particles import Ensemble, sample_initial

STD_NORMAL = {"kind": "gaussian", "mean": [0.0], "cov": [[1.0]]}


def _cell_average_normal(grid):
    e = grid.edges[0]
    return np.diff(norm.cdf(e)) / grid.widths[0]


def test_grid_geometry():
    g = GridSpec(((-1, 1, 4), (0, 3, 3)))
    assert g.shape == (4, 3) and g.cell_volume == pytest.approx(0.5)
    np.testing.assert_allclose(g.centers[0], [-0.75, -0.25, 0.25, 0.75])
    assert g.mesh().shape == (4, 3, 2)
    with pytest.raises(ContractError):
        GridSpec(((1, 0, 3),))


def test_histogram_against_standard_normal():
    # pinned seed: the L1 error at N = 1e5 on 120 cells scatters around 0.018
    grid = GridSpec(((-6, 6, 120),))
    h = histogram(sample_initial(STD_NORMAL, 100_000, seed=0), grid)
    ref = DensityGrid(grid, _cell_average_normal(grid) / (_cell_average_normal(grid).sum() * grid.cell_volume))
    assert h.mass == pytest.approx(1.0, abs=1e-12)
    assert l1_distance(h, ref) <= 0.02


def test_kde_against_standard_normal():
    grid = GridSpec(((-6, 6, 120),))
    d = kde(sample_initial(STD_NORMAL, 20_000, seed=1), grid)
    ref = analytic_gaussian([0.0], [[1.0]], grid)
    assert d.mass == pytest.approx(1.0, abs=1e-9)
    assert l1_distance(d, ref) < 0.03


def test_histogram_out_of_grid_policies():
    e = Ensemble(0.0, np.array([[0.1], [0.5], [5.0]]))
    grid = GridSpec(((0, 1, 2),))
    dropped = histogram(e, grid)
    assert dropped.dropped == 1
    np.testing.assert_allclose(dropped.values, [1.0, 1.0])
    clipped = histogram(e, grid, policy="clip")
    np.testing.assert_allclose(clipped.values, [2 / 3, 4 / 3])
    with pytest.raises(ContractError):
        histogram(e, grid, policy="error")


def test_histogram_upper_edge_is_closed():
    h = histogram(Ensemble(0.0, np.array([[1.0], [0.0]])), GridSpec(((0, 1, 2),)), policy="error")
    np.testing.assert_allclose(h.values, [1.0, 1.0])


def test_histogram_dimension_mismatch():
    with pytest.raises(DimensionError):
        histogram(Ensemble(0.0, np.zeros((3, 2))), GridSpec(((0, 1, 2),)))


def test_moments_of_discretized_gaussian():
    mean, cov = np.array([0.3, -0.2]), np.array([[0.5, 0.1], [0.1, 0.3]])
    d = analytic_gaussian(mean, cov, GridSpec(((-5, 5, 200), (-5, 5, 200))))
    m = moments(d)
    np.testing.assert_allclose(m.mean, mean, atol=1e-10)
    # point values at centers: the midpoint rule is spectrally accurate for a Gaussian
    np.testing.assert_allclose(m.cov, cov, atol=1e-10)


def test_uniform_initial_density_moments():
    d = initial_density({"kind": "uniform", "low": [-0.5], "high": [1.0]}, GridSpec(((-2, 2, 400),)))
    m = moments(d)
    assert m.mean[0] == pytest.approx(0.25, abs=1e-12)
    # cell-center quadrature of a piecewise-constant density loses w^2/12
    assert m.cov[0, 0] == pytest.approx(1.5**2 / 12 - 0.01**2 / 12, rel=1e-9)


def test_ball_initial_density():
    d = initial_density({"kind": "delta_cloud", "center": [0, 0], "radius": 1.0},
                        GridSpec(((-2, 2, 100), (-2, 2, 100))))
    assert d.mass == pytest.approx(1.0)
    assert np.trace(moments(d).cov) == pytest.approx(0.5, rel=0.02)
    with pytest.raises(ContractError):
        initial_density({"kind": "delta_cloud", "center": [0]}, GridSpec(((-1, 1, 10),)))


def test_stale_grid_refused():
    g = GridSpec(((0, 1, 4),))
    with pytest.raises(StaleGridError):
        moments(DensityGrid(g, np.full(4, 2.0)))


def test_negative_values_refused():
    with pytest.raises(ContractError):
        DensityGrid(GridSpec(((0, 1, 2),)), [2.5, -0.5])


def test_l1_requires_matching_grids():
    a = analytic_gaussian([0], [[1]], GridSpec(((-5, 5, 50),)))
    b = analytic_gaussian([0], [[1]], GridSpec(((-5, 5, 100),)))
    with pytest.raises(ContractError):
        l1_distance(a, b)


def test_coarsening_preserves_mass():
    d = analytic_gaussian([0.2], [[0.3]], GridSpec(((-4, 4, 120),)))
    c = d.coarsened(4)
    assert c.grid.shape == (30,)
    assert c.mass == pytest.approx(d.mass, abs=1e-13)


def test_write_read_round_trip(tmp_path):
    d = analytic_gaussian([0, 1], [[1, 0], [0, 2]], GridSpec(((-4, 4, 8), (-3, 5, 6))), time=0.25)
    write_density(tmp_path / "snap", d)
    back = read_density(tmp_path / "snap")
    np.testing.assert_array_equal(back.values, d.values)
    assert back.time == 0.25 and back.grid == d.grid
