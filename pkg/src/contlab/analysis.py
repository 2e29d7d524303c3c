"""Experiments that compare particle, density and transport results."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.linalg import expm

from .density import (
    DensityGrid,
    GridSpec,
    analytic_gaussian,
    histogram,
    initial_density,
    l1_distance,
    moments,
)
from .errors import BinningError, ContractError, DimensionError
from .fields import VelocityField, apply_D, shift_series
from .particles import (
    Distribution,
    Ensemble,
    Trajectories,
    _vec,
    integrate_ode,
    ode_trajectories,
    sample_initial,
)
from .transport import TransportRun, residual, solve_continuity

__all__ = [
    "ScalingReport",
    "fit_order",
    "ReynoldsReport",
    "reynolds_check",
    "gaussian_transport",
    "concentration_check",
    "MomentExpansionReport",
    "moment_expansion_check",
    "dual_expansion_check",
    "DetectionVerdict",
    "detect_stochasticity",
    "ScalingDetection",
    "detect_scaling",
    "histogram_run",
    "density_mode_detection",
]


# ----------------------------------------------------------------------------
# scaling reports


def fit_order(params, quantities) -> float:
    """Least-squares slope of ``log q`` against ``log param``."""
    p = np.asarray(params, dtype=float)
    q = np.asarray(quantities, dtype=float)
    if np.any(q <= 0):
        return math.nan
    return float(np.polyfit(np.log(p), np.log(q), 1)[0])


@dataclass(frozen=True, eq=False)
class ScalingReport:
    sigmas: np.ndarray
    quantities: np.ndarray
    fitted_order: float
    passed: bool
    threshold: float
    parameter: str = "sigma"
    exact: bool = False  # every quantity at round-off level
    extra: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=float)
        q = np.asarray(self.quantities, dtype=float)
        if s.shape != q.shape or s.ndim != 1:
            raise ContractError("sigmas and quantities must be matching 1-d sequences")
        if np.any(np.diff(s) >= 0):
            raise ContractError("sigmas must be strictly decreasing")
        if not np.all(np.isfinite(q)):
            raise ContractError("quantities must be finite")
        object.__setattr__(self, "sigmas", s)
        object.__setattr__(self, "quantities", q)

    @property
    def halving_ratios(self) -> np.ndarray:
        return self.quantities[:-1] / np.where(self.quantities[1:] == 0, np.nan, self.quantities[1:])

    def to_dict(self) -> dict:
        return {
            "parameter": self.parameter,
            "values": self.sigmas.tolist(),
            "quantities": self.quantities.tolist(),
            "fitted_order": None if math.isnan(self.fitted_order) else self.fitted_order,
            "threshold": self.threshold,
            "exact": self.exact,
            "pass": bool(self.passed),
            **{k: _plain(v) for k, v in self.extra.items()},
        }

    def rows(self) -> list[dict]:
        return [{self.parameter: float(s), "quantity": float(q)} for s, q in zip(self.sigmas, self.quantities)]


def _scaling(params, quantities, threshold, parameter="sigma", exact_tol=1e-12, **extra) -> ScalingReport:
    q = np.asarray(quantities, dtype=float)
    exact = bool(np.all(q <= exact_tol))
    order = fit_order(params, q) if not exact else math.nan
    passed = exact or (not math.isnan(order) and order >= threshold and bool(np.all(np.diff(q) < 0)))
    return ScalingReport(np.asarray(params, dtype=float), q, order, passed, threshold, parameter, exact, extra)


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


# ----------------------------------------------------------------------------
# Reynolds consistency


def gaussian_transport(field: VelocityField, mean, cov, t0: float, t1: float):
    """Exact mean and covariance of a Gaussian carried by an affine field."""
    if field.affine is None:
        raise ContractError("closed-form transport needs an affine field")
    A, b = field.affine
    p = A.shape[0]
    aug = np.zeros((p + 1, p + 1))
    aug[:p, :p], aug[:p, p] = A, b
    E = expm(aug * (t1 - t0))
    Phi, c = E[:p, :p], E[:p, p]
    mean = _vec(mean, p)
    return Phi @ mean + c, Phi @ np.asarray(cov, dtype=float).reshape(p, p) @ Phi.T


@dataclass(frozen=True, eq=False)
class ReynoldsReport:
    l1_pde: float
    l1_analytic: float | None
    particles: DensityGrid
    pde: DensityGrid
    analytic: DensityGrid | None
    run: TransportRun
    ensemble: Ensemble
    settings: dict

    def to_dict(self) -> dict:
        return {"l1_pde": self.l1_pde, "l1_analytic": self.l1_analytic,
                "pde_steps": self.run.diagnostics.get("steps"),
                "pde_max_step_mass_drift": self.run.diagnostics.get("max_step_mass_drift"),
                "dropped_particles": self.particles.dropped, "settings": _plain(self.settings)}


_DEFAULT_REFINE = {1: 32, 2: 4, 3: 1}


def reynolds_check(field: VelocityField, init_dist, n_particles: int, t_end: float, grid, *, seed: int = 0,
                   t0: float = 0.0, dt: float = 1e-3, method: str = "rk4", pde_refine: int | None = None,
                   cfl: float = 0.9, output_dt: float | None = None, threads: int = 1) -> ReynoldsReport:
    """Particle histogram against the upwind PDE solution (and the closed form for affine fields).

    The PDE runs on a grid refined ``pde_refine`` times per axis and is summed
    back onto ``grid`` for comparison; snapshots are stored every
    ``output_dt`` so that the run can be differenced in time afterwards.
    """
    grid = grid if isinstance(grid, GridSpec) else GridSpec(tuple(grid))
    dist = Distribution.from_dict(init_dist) if isinstance(init_dist, dict) else init_dist
    if dist.dim != grid.dim or field.dim != grid.dim:
        raise DimensionError("field, distribution and grid dimensions differ")
    refine = _DEFAULT_REFINE.get(grid.dim, 1) if pde_refine is None else int(pde_refine)
    e0 = sample_initial(dist, n_particles, grid.dim, seed=seed, time=t0)
    e1 = integrate_ode(field, e0, t_end, dt, method, threads=threads)
    hist = histogram(e1, grid)

    fine = grid.refined(refine)
    d0 = initial_density(dist, fine, time=t0)
    span = t_end - t0
    output_dt = span / 100 if output_dt is None else float(output_dt)
    n_out = max(int(round(span / output_dt)), 1)
    outs = t0 + span * np.arange(1, n_out + 1) / n_out
    run = solve_continuity(field, d0, t_end, cfl, output_times=outs)
    pde = run.snapshots[-1].coarsened(refine)

    analytic = None
    l1_an = None
    if field.affine is not None and dist.kind == "gaussian":
        m, C = gaussian_transport(field, dist.mean, dist.cov, t0, t_end)
        analytic = analytic_gaussian(m, C, grid, t_end)
        l1_an = l1_distance(hist, analytic)
    settings = {"n_particles": n_particles, "t0": t0, "t_end": t_end, "dt": dt, "method": method,
                "pde_refine": refine, "cfl": cfl, "output_dt": output_dt, "seed": seed,
                "grid": grid.to_list(), "initial": dist.to_dict(), "field": field.describe()}
    return ReynoldsReport(l1_distance(hist, pde), l1_an, hist, pde, analytic, run, e1, settings)


# ----------------------------------------------------------------------------
# concentration (integral against a narrowing Gaussian)


def _gauss_nodes(dim: int, n: int):
    z, w = hermegauss(n)
    w = w / math.sqrt(2 * math.pi)
    grids = np.meshgrid(*[z] * dim, indexing="ij")
    nodes = np.stack(grids, axis=-1).reshape(-1, dim)
    weights = np.ones(1)
    for _ in range(dim):
        weights = np.multiply.outer(weights, w).ravel()
    return nodes, weights


def concentration_check(f, x, sigmas, *, bound: float | None = None, n_nodes: int = 40,
                        threshold: float = 1.8) -> ScalingReport:
    """``|int f rho_sigma - f(x)|`` for ``rho_sigma = N(x, sigma^2 I)`` over a sigma ladder.

    ``f`` maps points of shape ``(..., dim)`` to scalars.  Quadrature is
    tensor Gauss-Hermite, exact for polynomials of degree < 2 n_nodes.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    sig = np.asarray(sigmas, dtype=float)
    if np.any(sig <= 0):
        raise ContractError("sigmas must be positive")
    nodes, weights = _gauss_nodes(x.size, n_nodes)
    # boundedness probe over the widest quadrature box
    probe = x + sig.max() * nodes
    vals = np.asarray(f(probe), dtype=float)
    if not np.all(np.isfinite(vals)) or (bound is not None and np.any(np.abs(vals) > bound)):
        raise ContractError("f is unbounded (or exceeds its declared bound) on the quadrature grid")
    fx = float(np.asarray(f(x[None]), dtype=float).reshape(-1)[0])
    q = []
    for s in sig:
        integral = float(np.dot(weights, np.asarray(f(x + s * nodes), dtype=float).reshape(-1)))
        q.append(abs(integral - fx))
    tol = 1e-12 * max(1.0, abs(fx))
    return _scaling(sig, q, threshold, exact_tol=tol)


# ----------------------------------------------------------------------------
# moment expansion


@dataclass(frozen=True, eq=False)
class MomentExpansionReport:
    mean: ScalingReport
    variance: ScalingReport
    linear_coefficient: np.ndarray  # (cov_measured - Sigma) / dt, Frobenius-normed per sigma
    cross_coefficient: np.ndarray  # cross_terms / dt per sigma
    cross_relative_error: np.ndarray
    cross_tolerance: float
    halving_band: tuple
    truncation_diagnostic: float
    mode: str
    details: list

    @property
    def halving_ratios(self) -> np.ndarray:
        return self.variance.halving_ratios

    @property
    def cross_pass(self) -> bool:
        return bool(np.all(self.cross_relative_error <= self.cross_tolerance))

    @property
    def halving_pass(self) -> bool:
        lo, hi = self.halving_band
        r = self.halving_ratios
        return bool(np.all((r >= lo) & (r <= hi)))

    @property
    def passed(self) -> bool:
        return self.mean.passed and self.variance.passed and self.cross_pass and self.halving_pass

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "mean": self.mean.to_dict(),
            "variance": self.variance.to_dict(),
            "linear_coefficient": self.linear_coefficient.tolist(),
            "cross_coefficient": self.cross_coefficient.tolist(),
            "cross_relative_error": self.cross_relative_error.tolist(),
            "cross_tolerance": self.cross_tolerance,
            "halving_ratios": self.halving_ratios.tolist(),
            "halving_band": list(self.halving_band),
            "cross_pass": self.cross_pass,
            "halving_pass": self.halving_pass,
            "truncation_diagnostic": self.truncation_diagnostic,
            "pass": self.passed,
            "details": _plain(self.details),
        }


def _window_stats(field, pts, weights, t0, dt, J):
    """Weighted mean, covariance and cross terms from the shift series at each point."""
    mean = weights @ pts
    dev = pts - mean
    cov = (dev * weights[:, None]).T @ dev
    g = shift_series(field, pts, t0, J)
    gval = g(dt)
    cross = (dev * weights[:, None]).T @ gval
    cross = cross + cross.T
    return mean, cov, cross, g.last_term(dt)


def _one_window_pde(field, x0, sigma, dt, t0, J, c_res, half_width, cfl, max_cells, extrapolate=True):
    """Moments before and after one window; with ``extrapolate`` the upwind
    O(cell width) error is cancelled by Richardson extrapolation over two grids."""
    if extrapolate:
        a = _one_window_pde(field, x0, sigma, dt, t0, J, c_res, half_width, cfl, max_cells, False)
        b = _one_window_pde(field, x0, sigma, dt, t0, J, c_res / 2, half_width, cfl, max_cells, False)
        m0, S0, cross, diag = b[:4]
        # extrapolate the increments, then re-attach the fine-grid initial state
        dm = 2 * (b[4] - b[0]) - (a[4] - a[0])
        dC = 2 * (b[5] - b[1] - b[2]) - (a[5] - a[1] - a[2])
        info = {"cells": [a[6]["cells"], b[6]["cells"]], "cell_width": [a[6]["cell_width"], b[6]["cell_width"]],
                "steps": [a[6]["steps"], b[6]["steps"]], "extrapolated": True}
        return m0, S0, cross, diag, m0 + dm, S0 + cross + dC, info
    p = field.dim
    v0 = np.abs(field(t0, x0[None])[0])
    w = c_res * sigma**2 * dt
    axes = []
    for j in range(p):
        hw = half_width * sigma + 2 * v0[j] * dt + 4 * w
        n = int(math.ceil(2 * hw / w))
        axes.append((x0[j] - hw, x0[j] + hw, n))
    grid = GridSpec(tuple(axes))
    if int(np.prod(grid.shape)) > max_cells:
        raise ContractError(f"resolution rule needs {int(np.prod(grid.shape))} cells > max_cells={max_cells}")
    d0 = analytic_gaussian(x0, sigma**2 * np.eye(p), grid, t0)
    pts = grid.mesh().reshape(-1, p)
    wts = d0.values.ravel() * d0.cell_volume
    m0, S0, cross, diag = _window_stats(field, pts, wts, t0, dt, J)
    run = solve_continuity(field, d0, t0 + dt, cfl)
    m1 = moments(run.snapshots[-1])
    return m0, S0, cross, diag, m1.mean, m1.cov, {"cells": int(np.prod(grid.shape)), "cell_width": w,
                                                  "steps": run.diagnostics["steps"]}


def _one_window_particles(field, x0, sigma, dt, t0, J, n, seed, step, threads):
    p = field.dim
    e0 = sample_initial(Distribution("gaussian", mean=tuple(x0), cov=tuple(map(tuple, sigma**2 * np.eye(p)))),
                        n, p, seed=seed, time=t0)
    wts = np.full(n, 1.0 / n)
    m0, S0, cross, diag = _window_stats(field, e0.positions, wts, t0, dt, J)
    e1 = integrate_ode(field, e0, t0 + dt, step, "rk4", threads=threads)
    m1 = e1.positions.mean(axis=0)
    dev = e1.positions - m1
    return m0, S0, cross, diag, m1, dev.T @ dev / n, {"particles": n}


def moment_expansion_check(field: VelocityField, x0, sigmas, dt: float, mode: str = "pde", *, t0: float = 0.0,
                           truncation: int = 8, resolution: float = 10.0, half_width: float = 8.0,
                           cfl: float = 0.9, max_cells: int = 2_000_000, n_particles: int = 200_000,
                           seed: int = 0, step: float | None = None, threshold: float = 1.5,
                           cross_tolerance: float = 0.15, halving_band=(3.4, 4.6),
                           extrapolate: bool = True, threads: int = 1) -> MomentExpansionReport:
    """One window ``dt`` from ``N(x0, sigma^2 I)`` for each sigma.

    The mean quantity is ``|mean(t0+dt) - (x + g(x; dt))| / dt`` and the
    variance quantity ``|cov(t0+dt) - Sigma - cross| / dt`` where ``x``,
    ``Sigma`` and ``cross`` are taken from the discrete initial density (PDE
    mode) or the initial sample (particle mode).  PDE mode uses cell width
    ``resolution * sigma**2 * dt`` and, unless ``extrapolate`` is off,
    combines it with a run at half that width to cancel the first-order
    upwind error.
    """
    if mode not in ("pde", "particles"):
        raise ContractError(f"unknown mode {mode!r}")
    x0 = _vec(x0, field.dim)
    sig = np.asarray(sigmas, dtype=float)
    mean_q, var_q, lin, crs, details = [], [], [], [], []
    worst_diag = 0.0
    for k, s in enumerate(sig):
        if mode == "pde":
            out = _one_window_pde(field, x0, s, dt, t0, truncation, resolution, half_width, cfl, max_cells,
                                  extrapolate)
        else:
            out = _one_window_particles(field, x0, s, dt, t0, truncation, n_particles, seed + k,
                                        step if step is not None else dt / 10, threads)
        m0, S0, cross, diag, m1, C1, info = out
        worst_diag = max(worst_diag, diag)
        g = shift_series(field, m0, t0, truncation)(dt)
        mean_q.append(float(np.linalg.norm(m1 - (m0 + g))) / dt)
        var_q.append(float(np.linalg.norm(C1 - S0 - cross)) / dt)
        lin_k = (C1 - S0) / dt
        lin.append(lin_k)
        crs.append(cross / dt)
        details.append({"sigma": float(s), "mean_quantity": mean_q[-1], "variance_quantity": var_q[-1],
                        "linear_coefficient": lin_k, "cross_coefficient": cross / dt, **info})
    if worst_diag > 1e-10:
        raise ContractError(f"shift-series truncation diagnostic {worst_diag:.3g} exceeds 1e-10; reduce dt")
    lin = np.array(lin)
    crs = np.array(crs)
    rel = np.array([np.linalg.norm(a - b) / np.linalg.norm(b) for a, b in zip(lin, crs)])
    mean_rep = _scaling(sig, mean_q, threshold, exact_tol=1e-12)
    var_rep = _scaling(sig, var_q, threshold, exact_tol=1e-12)
    scalar = lambda a: a.reshape(len(sig), -1)[:, 0] if field.dim == 1 else np.array([np.trace(m) for m in a])
    return MomentExpansionReport(mean_rep, var_rep, scalar(lin), scalar(crs), rel, cross_tolerance,
                                 tuple(halving_band), worst_diag, mode, details)


def dt_ladder_check(field: VelocityField, x0, sigma: float, dts, *, t0: float = 0.0, truncation: int = 8,
                    resolution: float = 10.0, half_width: float = 8.0, cfl: float = 0.9,
                    max_cells: int = 2_000_000, threshold: float = 1.8, extrapolate: bool = True) -> ScalingReport:
    """Remainder ``|cov - Sigma - cross|`` at fixed sigma over decreasing ``dt`` (expected order 2)."""
    x0 = _vec(x0, field.dim)
    q = []
    for dt in dts:
        m0, S0, cross, diag, m1, C1, _ = _one_window_pde(field, x0, sigma, dt, t0, truncation, resolution,
                                                         half_width, cfl, max_cells, extrapolate)
        q.append(float(np.linalg.norm(C1 - S0 - cross)))
    return _scaling(np.asarray(dts, dtype=float), q, threshold, parameter="dt")


__all__.append("dt_ladder_check")


# ----------------------------------------------------------------------------
# dual expansion


def dual_expansion_check(field: VelocityField, f, x0, sigma: float, dt: float, max_order: int = 2, *,
                         t0: float = 0.0, cell_width: float | None = None, half_width: float = 8.0,
                         cfl: float = 0.9, tolerances=(0.02, 0.05), abs_tol: float = 1e-9) -> dict:
    """Compare time derivatives of ``int f rho`` with ``int (D^j f) rho`` for ``j = 1..max_order``.

    The left side uses central differences with step ``dt`` over a PDE run
    started from ``N(x0, sigma^2 I)`` at ``t0``; both sides refer to the
    middle snapshot at ``t0 + dt``.  ``f(t, u)`` must be series compatible.
    Order ``j`` passes when ``|left - right| <= tolerances[j-1] * scale + abs_tol``.
    """
    if not field.has_oracle:
        raise ContractError("dual expansion needs a field with a derivative oracle")
    if max_order not in (1, 2):
        raise ContractError("max_order must be 1 or 2")
    x0 = _vec(x0, field.dim)
    p = field.dim
    w = cell_width if cell_width is not None else sigma / 50
    v0 = np.abs(field(t0, x0[None])[0])
    axes = []
    for j in range(p):
        hw = half_width * sigma + 3 * v0[j] * dt + 4 * w
        axes.append((x0[j] - hw, x0[j] + hw, int(math.ceil(2 * hw / w))))
    grid = GridSpec(tuple(axes))
    d0 = analytic_gaussian(x0, sigma**2 * np.eye(p), grid, t0)
    run = solve_continuity(field, d0, t0 + 2 * dt, cfl, output_times=[t0 + dt, t0 + 2 * dt])
    pts = grid.mesh().reshape(-1, p)
    vol = grid.cell_volume

    def integral(snap, fn):
        vals = np.asarray(fn(snap.time, pts), dtype=float).reshape(-1)
        return float(vals @ snap.values.ravel() * vol)

    I = [integral(s, f) for s in run.snapshots]
    mid = run.snapshots[1]
    lefts = {1: (I[2] - I[0]) / (2 * dt), 2: (I[2] - 2 * I[1] + I[0]) / dt**2}
    out = {"orders": [], "cells": int(np.prod(grid.shape)), "cell_width": w, "time": mid.time}
    for j in range(1, max_order + 1):
        Djf = apply_D(field, f, mid.time, pts, j)
        right = float(np.asarray(Djf, dtype=float).reshape(-1) @ mid.values.ravel() * vol)
        left = lefts[j]
        dev = abs(left - right)
        scale = max(abs(left), abs(right))
        tol = tolerances[j - 1]
        out["orders"].append({"order": j, "left": left, "right": right, "deviation": dev,
                              "relative_deviation": dev / scale if scale > abs_tol else 0.0,
                              "tolerance": tol, "pass": dev <= tol * scale + abs_tol})
    out["pass"] = all(o["pass"] for o in out["orders"])
    return out


# ----------------------------------------------------------------------------
# stochasticity detection (trajectory mode)


@dataclass(frozen=True, eq=False)
class DetectionVerdict:
    conditional_variance_rate: np.ndarray
    mean_shift_check: float
    decision: str
    threshold_used: float
    floor_rate: float
    delta: float
    time: float
    bin_width: np.ndarray
    n_bins: int
    dropped_fraction: float
    total_variance: float
    within_variance: float
    between_variance: float
    closure: float
    binning_bias_bound: float

    @property
    def rate(self) -> float:
        return float(np.trace(self.conditional_variance_rate))

    @property
    def stochastic(self) -> bool:
        return self.decision == "stochastic"

    def to_dict(self) -> dict:
        return {
            "conditional_variance_rate": self.conditional_variance_rate.tolist(),
            "rate": self.rate,
            "mean_shift_check": self.mean_shift_check,
            "decision": self.decision,
            "threshold_used": self.threshold_used,
            "floor_rate": self.floor_rate,
            "delta": self.delta,
            "time": self.time,
            "bin_width": self.bin_width.tolist(),
            "n_bins": self.n_bins,
            "dropped_fraction": self.dropped_fraction,
            "law_of_total_variance": {
                "total": self.total_variance,
                "expected_conditional_variance": self.within_variance,
                "variance_of_conditional_means": self.between_variance,
                "closure": self.closure,
                "binning_bias_bound": self.binning_bias_bound,
            },
        }


def _bin_ids(x: np.ndarray, width: np.ndarray) -> np.ndarray:
    keys = np.floor((x - x.min(axis=0)) / width).astype(np.int64)
    if keys.shape[1] == 1:
        return keys[:, 0]
    _, ids = np.unique(keys, axis=0, return_inverse=True)
    return ids.reshape(-1)


def _within(ids, values, keep):
    """Pooled within-bin covariance, bin means and weights for retained bins."""
    ids = ids[keep]
    values = values[keep]
    uniq, inv, counts = np.unique(ids, return_inverse=True, return_counts=True)
    p = values.shape[1]
    sums = np.zeros((uniq.size, p))
    np.add.at(sums, inv, values)
    means = sums / counts[:, None]
    dev = values - means[inv]
    within = dev.T @ dev / values.shape[0]
    return within, means, counts, inv


def _calibration_residual(field, x_t, t, delta, h, J):
    """Residual of a deterministic Euler twin at step ``h`` against the shift series."""
    n_steps = max(int(round(delta / h)), 1)
    hs = delta / n_steps
    x = x_t.copy()
    tt = t
    for _ in range(n_steps):
        x = x + hs * field(tt, x)
        tt += hs
    return x - x_t - shift_series(field, x_t, t, J)(delta)


def detect_stochasticity(traj: Trajectories, field_hypothesis: VelocityField, delta: float, *,
                         time: float | None = None, bin_fraction: float = 0.02, min_count: int = 30,
                         max_dropped: float = 0.1, threshold_factor: float = 5.0, truncation: int = 8,
                         calibration: Trajectories | None = None, min_trajectories: int = 10_000) -> DetectionVerdict:
    """Conditional-variance test for noise the hypothesised field cannot produce.

    Residuals ``r = xi(t + delta) - xi(t) - g(xi(t), t; delta)`` are binned by
    ``xi(t)``; the pooled within-bin covariance of ``r`` over ``delta`` is
    the conditional variance rate.  The floor comes from a zero-noise twin:
    ``calibration`` trajectories if given, otherwise a deterministic Euler
    integration from ``xi(t)`` at the trajectory spacing.
    """
    if traj.n < min_trajectories:
        raise ContractError(f"need at least {min_trajectories} trajectories, got {traj.n}")
    if traj.dim != field_hypothesis.dim:
        raise DimensionError("trajectory and field dimensions differ")
    t = traj.times[0] if time is None else float(time)
    k0 = traj.index_of(t)
    k1 = traj.index_of(t + delta)
    spacing = float(np.max(np.diff(traj.times[k0:k1 + 1])))
    if spacing > delta / 10 * (1 + 1e-9):
        raise ContractError(f"trajectory spacing {spacing:.3g} exceeds delta/10")
    x_t = traj.positions[k0]
    x_d = traj.positions[k1]
    g = shift_series(field_hypothesis, x_t, t, truncation)
    r = x_d - x_t - g(delta)

    std = x_t.std(axis=0)
    if np.any(std == 0):
        raise ContractError("ensemble at time t is degenerate along some axis")
    width = bin_fraction * std
    ids = _bin_ids(x_t, width)
    _, inv_all, counts_all = np.unique(ids, return_inverse=True, return_counts=True)
    keep = counts_all[inv_all] >= min_count
    dropped = 1.0 - keep.mean()
    if dropped > max_dropped:
        # widen until enough samples survive
        suggestion = width.copy()
        for _ in range(40):
            suggestion = suggestion * 1.25
            ids_s = _bin_ids(x_t, suggestion)
            _, inv_s, cnt_s = np.unique(ids_s, return_inverse=True, return_counts=True)
            if (cnt_s[inv_s] >= min_count).mean() >= 1 - max_dropped:
                break
        raise BinningError(f"{dropped:.1%} of samples fall in bins with fewer than {min_count} samples",
                           suggestion.tolist())
    within_r, means_r, counts, inv = _within(ids, r, keep)
    n = int(keep.sum())

    if calibration is not None:
        if calibration.n != traj.n or calibration.dim != traj.dim:
            raise ContractError("calibration trajectories must match the tested ensemble")
        c0 = calibration.positions[calibration.index_of(t)]
        c1 = calibration.positions[calibration.index_of(t + delta)]
        r_cal = c1 - c0 - shift_series(field_hypothesis, c0, t, truncation)(delta)
        ids_c = _bin_ids(c0, width)
        _, inv_c, cnt_c = np.unique(ids_c, return_inverse=True, return_counts=True)
        floor_cov, *_ = _within(ids_c, r_cal, cnt_c[inv_c] >= min_count)
    else:
        r_cal = _calibration_residual(field_hypothesis, x_t, t, delta, spacing, truncation)
        floor_cov, *_ = _within(ids, r_cal, keep)
    floor_rate = float(np.trace(floor_cov)) / delta
    rate = (within_r - floor_cov) / delta
    rate = (rate + rate.T) / 2

    # law of total variance on the raw positions xi(t + delta)
    xk = x_d[keep]
    total = float(np.trace(np.cov(xk.T, ddof=0).reshape(traj.dim, traj.dim)))
    within_x, means_x, _, _ = _within(ids, x_d, keep)
    between = float(np.trace(np.cov(means_x.T, aweights=counts, ddof=0).reshape(traj.dim, traj.dim)))
    within_tr = float(np.trace(within_x))
    closure = abs(total - within_tr - between)
    # drift variation across a bin, the bias of conditioning on bins instead of points
    slope = np.abs(np.diag(np.atleast_2d(_jacobian_diag(field_hypothesis, x_t[keep], t, delta, truncation))))
    bias = float(np.sum(width**2 / 12 * slope**2))

    weights = counts / counts.sum()
    mean_shift = float(np.sqrt(np.sum(weights * np.sum(means_r**2, axis=1))))
    scale = 1e-12 * total / delta
    threshold = max(threshold_factor * floor_rate, scale)
    decision = "stochastic" if float(np.trace(rate)) > threshold else "deterministic"
    return DetectionVerdict(rate, mean_shift, decision, threshold, floor_rate, float(delta), float(t), width,
                            int(counts.size), float(dropped), total, within_tr, between, closure, bias)


def _jacobian_diag(field, x, t, delta, J):
    """Mean diagonal of d(x + g(x; delta))/dx over the sample, by central differences."""
    h = 1e-5 * max(1.0, float(np.max(np.abs(x))))
    idx = np.linspace(0, x.shape[0] - 1, min(x.shape[0], 2000)).astype(int)
    xs = x[idx]
    out = np.zeros(field.dim)
    for j in range(field.dim):
        e = np.zeros(field.dim)
        e[j] = h
        gp = xs + e + shift_series(field, xs + e, t, J)(delta)
        gm = xs - e + shift_series(field, xs - e, t, J)(delta)
        out[j] = float(np.mean(np.abs((gp - gm)[:, j] / (2 * h))))
    return np.diag(out)


@dataclass(frozen=True, eq=False)
class ScalingDetection:
    deltas: np.ndarray
    rates: np.ndarray
    slope: float
    slope_se: float
    verdicts: list
    non_brownian: bool
    slope_tolerance: float

    def to_dict(self) -> dict:
        return {"deltas": self.deltas.tolist(), "rates": self.rates.tolist(), "slope": self.slope,
                "slope_se": self.slope_se, "non_brownian": self.non_brownian,
                "slope_tolerance": self.slope_tolerance,
                "decisions": [v.decision for v in self.verdicts]}


def detect_scaling(traj: Trajectories, field_hypothesis: VelocityField, deltas, *, time: float | None = None,
                   n_boot: int = 200, seed: int = 0, slope_tolerance: float = 0.25, **kwargs) -> ScalingDetection:
    """Slope of ``log rate`` against ``log delta``; Brownian noise gives a flat rate.

    The slope standard error comes from a particle bootstrap.  The scaling is
    called non-Brownian when ``|slope|`` exceeds both three standard errors and
    ``slope_tolerance``.
    """
    deltas = np.asarray(deltas, dtype=float)
    if deltas.size < 2:
        raise ContractError("need at least two deltas")
    verdicts = [detect_stochasticity(traj, field_hypothesis, d, time=time, **kwargs) for d in deltas]
    rates = np.array([v.rate for v in verdicts])
    if np.any(rates <= 0):
        return ScalingDetection(deltas, rates, math.nan, math.nan, verdicts, False, slope_tolerance)
    slope = fit_order(deltas, rates)
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    t = traj.times[0] if time is None else float(time)
    k0 = traj.index_of(t)
    x_t = traj.positions[k0]
    J = kwargs.get("truncation", 8)
    min_count = kwargs.get("min_count", 30)
    resid = [traj.positions[traj.index_of(t + d)] - x_t - shift_series(field_hypothesis, x_t, t, J)(d)
             for d in deltas]
    ids = [_bin_ids(x_t, v.bin_width) for v in verdicts]
    boots = []
    for _ in range(n_boot):
        pick = rng.integers(0, traj.n, traj.n)
        rs = []
        for d, r, b, v in zip(deltas, resid, ids, verdicts):
            bp = b[pick]
            _, inv, cnt = np.unique(bp, return_inverse=True, return_counts=True)
            w, *_ = _within(bp, r[pick], cnt[inv] >= min_count)
            rs.append(float(np.trace(w)) / d - v.floor_rate)
        rs = np.array(rs)
        if np.all(rs > 0):
            boots.append(fit_order(deltas, rs))
    se = float(np.std(boots, ddof=1)) if len(boots) > 1 else math.inf
    non_brownian = abs(slope) > 3 * se and abs(slope) > slope_tolerance
    return ScalingDetection(deltas, rates, slope, se, verdicts, bool(non_brownian), slope_tolerance)


# ----------------------------------------------------------------------------
# density mode


def histogram_run(traj: Trajectories, grid) -> TransportRun:
    """A run whose snapshots are particle histograms at every trajectory time."""
    grid = grid if isinstance(grid, GridSpec) else GridSpec(tuple(grid))
    snaps = tuple(histogram(traj.at(k), grid) for k in range(traj.times.size))
    return TransportRun(snaps, None, None, "histogram")


def _weak_norm(R, centers, width) -> float:
    grid = R.grid
    mesh = grid.mesh()
    best = 0.0
    for c in centers:
        phi = np.exp(-0.5 * np.sum(((mesh - c) / width) ** 2, axis=-1))
        best = max(best, abs(float(np.sum(R.values * phi) * grid.cell_volume)))
    return best


def density_mode_detection(runs, field_hypothesis: VelocityField, *, time: float | None = None,
                           n_tests: int = 9, test_width: float | None = None, ratio_threshold: float = 1.2,
                           floor: float = 1e-12) -> dict:
    """Continuity residual of density runs at increasing resolution.

    The residual is measured weakly, as the largest ``|<R, phi>|`` over
    Gaussian test functions fixed in space, so that it is comparable across
    grids.  Discretisation error shrinks under refinement; a diffusion the
    field cannot produce does not.  ``runs`` are ordered coarse to fine.
    """
    runs = list(runs)
    if len(runs) < 2:
        raise ContractError("need runs at two or more resolutions")
    widths = [float(np.max(r.grid.widths)) for r in runs]
    if any(b >= a for a, b in zip(widths, widths[1:])):
        raise ContractError("runs must be ordered from coarse to fine")
    ref = runs[0]
    k_ref = len(ref.snapshots) // 2 if time is None else ref.index_of(time)
    t = ref.times[k_ref]
    m = moments(ref.snapshots[k_ref])
    std = np.sqrt(np.diag(m.cov))
    w = 0.5 * std if test_width is None else np.broadcast_to(np.asarray(test_width, dtype=float), std.shape)
    offsets = np.linspace(-2, 2, n_tests)
    centers = np.stack(np.meshgrid(*[m.mean[j] + offsets * std[j] for j in range(len(std))], indexing="ij"),
                       axis=-1).reshape(-1, len(std))
    norms = []
    for run in runs:
        k = run.index_of(t)
        norms.append(_weak_norm(residual(field_hypothesis, run, k), centers, w))
    ratios = [a / b if b > 0 else math.inf for a, b in zip(norms, norms[1:])]
    if max(norms) <= floor:
        decision = "deterministic"
    else:
        decision = "stochastic" if min(ratios) < ratio_threshold else "deterministic"
    return {"residual_norms": norms, "cell_widths": widths, "refinement_ratios": ratios,
            "ratio_threshold": ratio_threshold, "time": float(t), "decision": decision}
