"""Cell-averaged densities on rectangular grids and their estimators."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, StaleGridError
from .particles import Distribution, Ensemble, _mat, _vec

__all__ = [
    "GridSpec",
    "DensityGrid",
    "MomentReport",
    "histogram",
    "kde",
    "default_bandwidth",
    "moments",
    "moments_ensemble",
    "l1_distance",
    "analytic_gaussian",
    "initial_density",
    "write_density",
    "read_density",
]

NORMALIZATION_TOL = 1e-9
STALE_TOL = 1e-6
_KDE_CHUNK = 8192


@dataclass(frozen=True)
class GridSpec:
    """Axes as ``((lo, hi, n), ...)``."""

    axes: tuple

    def __post_init__(self):
        axes = tuple((float(lo), float(hi), int(n)) for lo, hi, n in self.axes)
        if not axes:
            raise ContractError("grid needs at least one axis")
        for lo, hi, n in axes:
            if not hi > lo or n < 1:
                raise ContractError(f"invalid axis ({lo}, {hi}, {n})")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, lo, hi, n, dim=1) -> GridSpec:
        return cls(((lo, hi, n),) * dim)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(n for _, _, n in self.axes)

    @property
    def widths(self) -> np.ndarray:
        return np.array([(hi - lo) / n for lo, hi, n in self.axes])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    @property
    def centers(self) -> list:
        return [lo + (np.arange(n) + 0.5) * (hi - lo) / n for lo, hi, n in self.axes]

    @property
    def edges(self) -> list:
        return [np.linspace(lo, hi, n + 1) for lo, hi, n in self.axes]

    def mesh(self) -> np.ndarray:
        """Cell centers stacked as shape ``self.shape + (dim,)``."""
        return np.stack(np.meshgrid(*self.centers, indexing="ij"), axis=-1)

    def refined(self, factor: int) -> GridSpec:
        return GridSpec(tuple((lo, hi, n * int(factor)) for lo, hi, n in self.axes))

    def to_list(self) -> list:
        return [list(a) for a in self.axes]


def _as_spec(grid) -> GridSpec:
    if isinstance(grid, GridSpec):
        return grid
    if isinstance(grid, DensityGrid):
        return grid.grid
    return GridSpec(tuple(grid))


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Cell-averaged density snapshot.

    Constructors in this package return unit-mass grids; a grid built by
    hand may not be, and :func:`moments` refuses those.
    """

    grid: GridSpec
    values: np.ndarray
    time: float = 0.0
    dropped: int = 0
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        grid = _as_spec(self.grid)
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != grid.shape:
            raise ContractError(f"values shape {vals.shape} does not match grid {grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ContractError("density values must be finite")
        floor = -1e-12 * max(float(vals.max(initial=0.0)), 1.0)
        if np.any(vals < floor):
            raise ContractError("density values must be nonnegative")
        vals.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "time", float(self.time))

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def axes(self) -> tuple:
        return self.grid.axes

    @property
    def cell_volume(self) -> float:
        return self.grid.cell_volume

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def with_values(self, values, time=None, **meta) -> DensityGrid:
        return DensityGrid(self.grid, values, self.time if time is None else time, self.dropped,
                           {**self.meta, **meta})

    def coarsened(self, factor: int) -> DensityGrid:
        """Average blocks of ``factor`` cells per axis (mass preserving)."""
        f = int(factor)
        if any(n % f for n in self.grid.shape):
            raise ContractError("coarsening factor must divide every axis")
        shape = []
        for n in self.grid.shape:
            shape += [n // f, f]
        v = self.values.reshape(shape).mean(axis=tuple(range(1, 2 * self.dim, 2)))
        grid = GridSpec(tuple((lo, hi, n // f) for lo, hi, n in self.axes))
        return DensityGrid(grid, v, self.time, self.dropped, dict(self.meta))


def _assert_normalized(d: DensityGrid) -> DensityGrid:
    if abs(d.mass - 1.0) > NORMALIZATION_TOL:
        raise StaleGridError(f"constructor produced mass {d.mass!r}")
    return d


@dataclass(frozen=True, eq=False)
class MomentReport:
    mean: np.ndarray
    cov: np.ndarray
    mass: float

    @property
    def trace_cov(self) -> float:
        return float(np.trace(self.cov))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist(),
                "trace_cov": self.trace_cov, "mass": self.mass}


# ----------------------------------------------------------------------------
# estimators

_POLICIES = ("drop", "clip", "error")


def histogram(e: Ensemble, grid, policy: str = "drop") -> DensityGrid:
    """Cell value = count / (N_retained * cell_volume).

    ``policy`` decides what happens to particles outside the grid: ``drop``
    (counted in ``dropped``), ``clip`` into the nearest edge cell, or
    ``error``.
    """
    grid = _as_spec(grid)
    if policy not in _POLICIES:
        raise ContractError(f"unknown out-of-grid policy {policy!r}")
    if e.dim != grid.dim:
        raise DimensionError(f"ensemble dimension {e.dim} != grid dimension {grid.dim}")
    lo = np.array([a[0] for a in grid.axes])
    hi = np.array([a[1] for a in grid.axes])
    shape = np.array(grid.shape)
    pos = e.positions
    idx = np.floor((pos - lo) / (hi - lo) * shape).astype(np.int64)
    idx = np.where(pos == hi, shape - 1, idx)  # closed upper edge
    inside = np.all((idx >= 0) & (idx < shape), axis=1)
    dropped = 0
    if not inside.all():
        if policy == "error":
            raise ContractError(f"{int((~inside).sum())} particles lie outside the grid")
        if policy == "clip":
            idx = np.clip(idx, 0, shape - 1)
        else:
            dropped = int((~inside).sum())
            idx = idx[inside]
    kept = idx.shape[0]
    if kept == 0:
        raise ContractError("no particles inside the grid")
    flat = np.ravel_multi_index(idx.T, grid.shape)
    counts = np.bincount(flat, minlength=int(np.prod(grid.shape))).reshape(grid.shape)
    vals = counts / (kept * grid.cell_volume)
    return _assert_normalized(DensityGrid(grid, vals, e.time, dropped, {"estimator": "histogram"}))


def default_bandwidth(e: Ensemble) -> np.ndarray:
    """Per-axis ``std * N**(-1/(dim+4))``."""
    std = e.positions.std(axis=0)
    return std * e.n ** (-1.0 / (e.dim + 4))


def kde(e: Ensemble, grid, bandwidth=None, renormalize: bool = True) -> DensityGrid:
    """Gaussian kernel estimate at cell centers, renormalised to unit mass on the grid."""
    grid = _as_spec(grid)
    if e.dim != grid.dim:
        raise DimensionError(f"ensemble dimension {e.dim} != grid dimension {grid.dim}")
    if grid.dim > 3:
        raise ContractError("kde supports at most three dimensions")
    h = default_bandwidth(e) if bandwidth is None else np.broadcast_to(
        np.asarray(bandwidth, dtype=float), (e.dim,))
    if np.any(h <= 0):
        raise ContractError("bandwidth must be positive (degenerate ensemble needs an explicit bandwidth)")
    centers = grid.centers
    vals = np.zeros(grid.shape)
    for start in range(0, e.n, _KDE_CHUNK):
        x = e.positions[start:start + _KDE_CHUNK]
        k = [
            np.exp(-0.5 * ((c[None, :] - x[:, j:j + 1]) / h[j]) ** 2) / (np.sqrt(2 * np.pi) * h[j])
            for j, c in enumerate(centers)
        ]
        if grid.dim == 1:
            vals += k[0].sum(axis=0)
        elif grid.dim == 2:
            vals += k[0].T @ k[1]
        else:
            vals += np.einsum("na,nb,nc->abc", *k)
    vals /= e.n
    if renormalize:
        mass = vals.sum() * grid.cell_volume
        if mass <= 0:
            raise ContractError("kernel mass vanished on the grid")
        vals = vals / mass
    out = DensityGrid(grid, vals, e.time, 0, {"estimator": "kde", "bandwidth": h.tolist()})
    return _assert_normalized(out) if renormalize else out


def moments(d: DensityGrid) -> MomentReport:
    """Mean and covariance by cell-center quadrature."""
    mass = d.mass
    if abs(mass - 1.0) > STALE_TOL:
        raise StaleGridError(f"density mass {mass:.12g} deviates from 1 by more than {STALE_TOL}")
    w = d.values * d.cell_volume
    mean = np.array([np.sum(w * _axis_coord(d.grid, j)) for j in range(d.dim)])
    cov = np.empty((d.dim, d.dim))
    dev = [_axis_coord(d.grid, j) - mean[j] for j in range(d.dim)]
    for i in range(d.dim):
        for j in range(i, d.dim):
            cov[i, j] = cov[j, i] = np.sum(w * dev[i] * dev[j])
    return MomentReport(mean=mean, cov=cov, mass=mass)


def _axis_coord(grid: GridSpec, j: int) -> np.ndarray:
    shape = [1] * grid.dim
    shape[j] = grid.shape[j]
    return grid.centers[j].reshape(shape)


def moments_ensemble(e: Ensemble) -> MomentReport:
    mean = e.positions.mean(axis=0)
    dev = e.positions - mean
    cov = dev.T @ dev / e.n
    return MomentReport(mean=mean, cov=(cov + cov.T) / 2, mass=1.0)


def l1_distance(a: DensityGrid, b: DensityGrid) -> float:
    if a.grid != b.grid:
        raise ContractError("l1_distance needs identical grids")
    return float(np.abs(a.values - b.values).sum() * a.cell_volume)


def analytic_gaussian(mean, cov, grid, time: float = 0.0) -> DensityGrid:
    """Gaussian evaluated at cell centers and renormalised on the grid."""
    grid = _as_spec(grid)
    p = grid.dim
    mean, cov = _vec(mean, p), _mat(cov, p)
    try:
        L = np.linalg.cholesky((cov + cov.T) / 2)
    except np.linalg.LinAlgError:
        raise ContractError("covariance must be positive definite") from None
    z = np.linalg.solve(L, (grid.mesh() - mean).reshape(-1, p).T)
    logd = -0.5 * np.sum(z * z, axis=0)
    vals = np.exp(logd - logd.max()).reshape(grid.shape)
    total = vals.sum() * grid.cell_volume
    if total <= 0:
        raise ContractError("Gaussian has no mass on the grid")
    return _assert_normalized(DensityGrid(grid, vals / total, time, 0, {"estimator": "analytic"}))


def initial_density(dist: Distribution | dict, grid, time: float = 0.0, subcells: int = 8) -> DensityGrid:
    """Grid version of an initial distribution (box and ball by sub-cell sampling)."""
    if isinstance(dist, dict):
        dist = Distribution.from_dict(dist)
    grid = _as_spec(grid)
    p = grid.dim
    if dist.kind == "gaussian":
        return analytic_gaussian(dist.mean, dist.cov, grid, time)
    if dist.kind == "uniform":
        lo, hi = _vec(dist.low, p), _vec(dist.high, p)
        vals = np.ones(())
        for j, edges in enumerate(grid.edges):
            frac = np.clip(np.minimum(edges[1:], hi[j]) - np.maximum(edges[:-1], lo[j]), 0, None)
            vals = np.multiply.outer(vals, frac)
    else:
        if dist.radius == 0:
            raise ContractError("a point mass has no grid density; use a positive radius")
        c = _vec(dist.center, p)
        offs = (np.arange(subcells) + 0.5) / subcells - 0.5
        vals = np.zeros(grid.shape)
        mesh = grid.mesh()
        for o in np.stack(np.meshgrid(*[offs] * p, indexing="ij"), axis=-1).reshape(-1, p):
            pts = mesh + o * grid.widths
            vals += np.sum((pts - c) ** 2, axis=-1) <= dist.radius**2
    total = vals.sum() * grid.cell_volume
    if total <= 0:
        raise ContractError("initial distribution has no mass on the grid")
    return _assert_normalized(DensityGrid(grid, vals / total, time, 0, {"estimator": "exact"}))


# ----------------------------------------------------------------------------
# I/O


def write_density(stem, d: DensityGrid) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (cell indices + value) and the ``<stem>.json`` sidecar."""
    stem = Path(stem)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"cell_index_{i + 1}" for i in range(d.dim)] + ["value"])
        for idx in np.ndindex(*d.grid.shape):
            w.writerow(list(idx) + [repr(float(d.values[idx]))])
    side = {"axes": d.grid.to_list(), "time": d.time, "mass": d.mass, "dropped": d.dropped}
    json_path.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def read_density(stem) -> DensityGrid:
    stem = Path(stem)
    side = json.loads(stem.with_suffix(".json").read_text())
    grid = GridSpec(tuple(tuple(a) for a in side["axes"]))
    vals = np.zeros(grid.shape)
    with stem.with_suffix(".csv").open(newline="") as fh:
        rows = csv.reader(fh)
        next(rows)
        for row in rows:
            vals[tuple(int(i) for i in row[:-1])] = float(row[-1])
    return DensityGrid(grid, vals, side["time"], int(side.get("dropped", 0)))
