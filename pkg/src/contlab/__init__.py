"""Numerical lab for particle flows and the continuity equation.

Particles move by ``dx/dt = v(t, x)`` (optionally with additive noise);
their densities are compared with upwind solutions of
``d rho/dt + div(rho v) = 0`` and its Fokker-Planck extension.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BinningError,
    BoundaryLeakError,
    CFLError,
    ConfigError,
    ContlabError,
    ContractError,
    DimensionError,
    DivergenceError,
    StaleGridError,
    UnrecoverableError,
    UnsupportedOrderError,
)
from .fields import FIELD_CATALOG, VelocityField, apply_D, divergence, make_field, shift_series  # noqa: E402
from .noise import NoisePath, NoiseSpec, increment_variance, sample_path  # noqa: E402
from .particles import Distribution, Ensemble, SdeSpec, Trajectories, sample_initial  # noqa: E402
from .particles import integrate_ode, integrate_sde, ode_trajectories, sde_trajectories  # noqa: E402
from .density import DensityGrid, GridSpec, analytic_gaussian, histogram, kde, l1_distance, moments  # noqa: E402
from .transport import recover_velocity, residual, solve_continuity, solve_fokker_planck  # noqa: E402
