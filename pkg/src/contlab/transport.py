"""Grid solvers for the continuity and Fokker-Planck equations.

The continuity solver is a first-order upwind finite-volume scheme.  Walls
carry no flux; a guard refuses to step once the density reaches the two
outermost cells of any axis, since anything crossing a wall would be lost.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .density import DensityGrid, GridSpec, read_density, write_density
from .errors import BoundaryLeakError, CFLError, ContractError, DimensionError, UnrecoverableError
from .fields import VelocityField

__all__ = [
    "TransportRun",
    "Residual",
    "Recovery",
    "cfl_limit",
    "diffusion_limit",
    "step_continuity",
    "step_fokker_planck",
    "solve_continuity",
    "solve_fokker_planck",
    "residual",
    "recover_velocity",
    "recover_divergence",
    "write_run",
    "read_run",
]

GUARD_CELLS = 2
LEAK_TOL = 1e-12
RECOVERY_FLOOR = 1e-3


@dataclass(frozen=True, eq=False)
class TransportRun:
    snapshots: tuple
    field: VelocityField | None
    cfl: float | None
    scheme: str = "upwind1"
    sigma: np.ndarray | None = None
    diagnostics: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        snaps = tuple(self.snapshots)
        if not snaps:
            raise ContractError("a run needs at least one snapshot")
        times = np.array([s.time for s in snaps])
        if np.any(np.diff(times) <= 0):
            raise ContractError("snapshot times must be strictly increasing")
        if any(s.grid != snaps[0].grid for s in snaps):
            raise ContractError("all snapshots must share one grid")
        object.__setattr__(self, "snapshots", snaps)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.snapshots])

    @property
    def grid(self) -> GridSpec:
        return self.snapshots[0].grid

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > tol:
            raise ContractError(f"no snapshot at t={t}")
        return k

    def coarsened(self, factor: int) -> TransportRun:
        return TransportRun(tuple(s.coarsened(factor) for s in self.snapshots), self.field, self.cfl,
                            self.scheme, self.sigma, dict(self.diagnostics))


# ----------------------------------------------------------------------------
# geometry helpers


def _face_points(grid: GridSpec, axis: int) -> np.ndarray:
    """Interior face centers normal to ``axis``; shape with n_axis - 1 along that axis."""
    centers = list(grid.centers)
    edges = grid.edges[axis]
    centers[axis] = edges[1:-1]
    return np.stack(np.meshgrid(*centers, indexing="ij"), axis=-1)


class _FaceVelocity:
    """Normal velocity on interior faces, cached for autonomous fields."""

    def __init__(self, field: VelocityField, grid: GridSpec):
        if field.dim != grid.dim:
            raise DimensionError(f"field dimension {field.dim} != grid dimension {grid.dim}")
        self.field = field
        self.points = [_face_points(grid, a) for a in range(grid.dim)]
        self.autonomous = field.affine is not None
        self._cache = None

    def __call__(self, t: float) -> list:
        if self.autonomous and self._cache is not None:
            return self._cache
        out = [self.field(t, pts)[..., a] for a, pts in enumerate(self.points)]
        if self.autonomous:
            self._cache = out
        return out


def _pad_faces(vf: np.ndarray, axis: int) -> np.ndarray:
    """Add zero-flux boundary faces so the array has n_axis + 1 entries along ``axis``."""
    pad = [(0, 0)] * vf.ndim
    pad[axis] = (1, 1)
    return np.pad(vf, pad)


def _outflow_rate(faces: list, widths: np.ndarray) -> np.ndarray:
    rate = 0.0
    for a, vf in enumerate(faces):
        v = _pad_faces(vf, a)
        hi = [slice(None)] * v.ndim
        lo = [slice(None)] * v.ndim
        hi[a], lo[a] = slice(1, None), slice(None, -1)
        rate = rate + (np.maximum(v[tuple(hi)], 0.0) + np.maximum(-v[tuple(lo)], 0.0)) / widths[a]
    return rate


def cfl_limit(field: VelocityField, d: DensityGrid, t: float | None = None) -> float:
    """Largest stable (and positivity preserving) upwind step at time ``t``."""
    faces = _FaceVelocity(field, d.grid)(d.time if t is None else t)
    rate = float(np.max(_outflow_rate(faces, d.grid.widths)))
    return np.inf if rate == 0 else 1.0 / rate


def _diffusion_matrix(sigma, dim: int) -> np.ndarray:
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        s = s * np.eye(dim)
    if s.shape != (dim, dim):
        raise DimensionError(f"sigma must be a scalar or a {dim}x{dim} matrix")
    if not np.all(np.isfinite(s)):
        raise ContractError("sigma must be finite")
    return 0.5 * s @ s.T


def _diffusion_rate(Dm: np.ndarray, widths: np.ndarray) -> float:
    rate = 2.0 * np.sum(np.diag(Dm) / widths**2)
    off = np.abs(Dm - np.diag(np.diag(Dm)))
    return float(rate + np.sum(off / np.outer(widths, widths)))


def diffusion_limit(sigma, d: DensityGrid) -> float:
    rate = _diffusion_rate(_diffusion_matrix(sigma, d.dim), d.grid.widths)
    return np.inf if rate == 0 else 1.0 / rate


def _check_guard(values: np.ndarray, cell_volume: float, tol: float = LEAK_TOL) -> None:
    for a in range(values.ndim):
        n = values.shape[a]
        g = min(GUARD_CELLS, n)
        band = np.concatenate([np.take(values, range(g), axis=a).ravel(),
                               np.take(values, range(n - g, n), axis=a).ravel()])
        if band.sum() * cell_volume > tol:
            raise BoundaryLeakError(
                f"density mass {band.sum() * cell_volume:.3g} within {GUARD_CELLS} cells of the boundary on axis {a}"
            )


def _advective_update(rho: np.ndarray, faces: list, widths, dt: float) -> np.ndarray:
    out = rho.copy()
    for a, vf in enumerate(faces):
        left = [slice(None)] * rho.ndim
        right = [slice(None)] * rho.ndim
        left[a], right[a] = slice(None, -1), slice(1, None)
        flux = np.maximum(vf, 0.0) * rho[tuple(left)] + np.minimum(vf, 0.0) * rho[tuple(right)]
        out -= (dt / widths[a]) * np.diff(_pad_faces(flux, a), axis=a)
    return out


def _grad_centered(rho: np.ndarray, axis: int, w: float) -> np.ndarray:
    g = np.zeros_like(rho)
    sl = [slice(None)] * rho.ndim
    lo, hi = list(sl), list(sl)
    mid = list(sl)
    mid[axis], lo[axis], hi[axis] = slice(1, -1), slice(None, -2), slice(2, None)
    g[tuple(mid)] = (rho[tuple(hi)] - rho[tuple(lo)]) / (2 * w)
    return g


def _diffusive_update(rho: np.ndarray, Dm: np.ndarray, widths, dt: float) -> np.ndarray:
    """Conservative flux-form ``sum_ij D_ij d_i d_j rho`` with zero flux through walls."""
    out = rho.copy()
    p = rho.ndim
    grads = None
    for i in range(p):
        left = [slice(None)] * p
        right = [slice(None)] * p
        left[i], right[i] = slice(None, -1), slice(1, None)
        flux = np.zeros(rho[tuple(left)].shape)
        if Dm[i, i]:
            flux -= Dm[i, i] * (rho[tuple(right)] - rho[tuple(left)]) / widths[i]
        for j in range(p):
            if j == i or not Dm[i, j]:
                continue
            if grads is None:
                grads = [_grad_centered(rho, k, widths[k]) for k in range(p)]
            gj = grads[j]
            flux -= Dm[i, j] * 0.5 * (gj[tuple(left)] + gj[tuple(right)])
        out -= (dt / widths[i]) * np.diff(_pad_faces(flux, i), axis=i)
    return out


def step_continuity(field: VelocityField, d: DensityGrid, dt: float, _faces=None) -> DensityGrid:
    """One upwind step of ``d rho/dt + div(v rho) = 0`` from ``d.time``."""
    return _step(field, d, dt, None, _faces)


def step_fokker_planck(drift: VelocityField, sigma, d: DensityGrid, dt: float, _faces=None) -> DensityGrid:
    """One explicit step of ``d rho/dt = -div(v rho) + 1/2 sigma sigma^T : grad^2 rho``."""
    return _step(drift, d, dt, _diffusion_matrix(sigma, d.dim), _faces)


def _step(field, d, dt, Dm, faces_obj):
    if dt <= 0:
        raise ContractError("dt must be positive")
    faces_obj = faces_obj or _FaceVelocity(field, d.grid)
    faces = faces_obj(d.time)
    widths = d.grid.widths
    adv = float(np.max(_outflow_rate(faces, widths)))
    diff = 0.0 if Dm is None else _diffusion_rate(Dm, widths)
    rate = adv + diff
    if dt * rate > 1.0 + 1e-12:
        raise CFLError(dt, 1.0 / rate, "CFL" if diff == 0 else "stability")
    _check_guard(d.values, d.cell_volume)
    rho = _advective_update(d.values, faces, widths, dt)
    if Dm is not None and np.any(Dm):
        rho = rho + (_diffusive_update(d.values, Dm, widths, dt) - d.values)
    return DensityGrid(d.grid, rho, d.time + dt, d.dropped, dict(d.meta))


def _solve(field, Dm, d0, t_end, cfl, output_times, max_dt):
    if not 0 < cfl <= 1:
        raise ContractError("cfl must lie in (0, 1]")
    if t_end < d0.time:
        raise ContractError("t_end precedes the initial snapshot")
    outs = sorted({float(t) for t in (output_times if output_times is not None else [])} | {float(t_end)})
    if outs[0] < d0.time - 1e-12 or outs[-1] > t_end + 1e-12:
        raise ContractError("output times must lie in [t0, t_end]")
    outs = [t for t in outs if t > d0.time + 1e-12]
    faces = _FaceVelocity(field, d0.grid)
    widths = d0.grid.widths
    diff = 0.0 if Dm is None else _diffusion_rate(Dm, widths)
    snaps = [d0]
    cur = d0
    steps = 0
    max_drift = 0.0
    min_value = float(d0.values.min())
    for target in outs:
        while cur.time < target - 1e-12 * max(1.0, abs(target)):
            rate = float(np.max(_outflow_rate(faces(cur.time), widths))) + diff
            dt = np.inf if rate == 0 else cfl / rate
            if max_dt is not None:
                dt = min(dt, max_dt)
            remaining = target - cur.time
            last = dt >= remaining * (1 - 1e-12)
            dt = min(dt, remaining)
            nxt = _step(field, cur, dt, Dm, faces)
            if last:
                nxt = DensityGrid(nxt.grid, nxt.values, target, nxt.dropped, nxt.meta)
            max_drift = max(max_drift, abs(nxt.values.sum() - cur.values.sum()) * cur.cell_volume)
            min_value = min(min_value, float(nxt.values.min()))
            cur = nxt
            steps += 1
        snaps.append(cur)
    diag = {"steps": steps, "max_step_mass_drift": max_drift, "min_value": min_value,
            "total_mass_drift": abs(cur.mass - d0.mass)}
    return snaps, diag


def solve_continuity(field: VelocityField, d0: DensityGrid, t_end: float, cfl: float = 0.9,
                     output_times=None, max_dt: float | None = None) -> TransportRun:
    """Repeated upwind steps with ``dt = cfl * cfl_limit``; snapshots land exactly on output times."""
    snaps, diag = _solve(field, None, d0, t_end, cfl, output_times, max_dt)
    return TransportRun(tuple(snaps), field, cfl, "upwind1", None, diag)


def solve_fokker_planck(drift: VelocityField, sigma, d0: DensityGrid, t_end: float, cfl: float = 0.9,
                        output_times=None, max_dt: float | None = None) -> TransportRun:
    """Upwind advection plus explicit central diffusion; ``sigma`` constant."""
    Dm = _diffusion_matrix(sigma, d0.dim)
    snaps, diag = _solve(drift, Dm if np.any(Dm) else None, d0, t_end, cfl, output_times, max_dt)
    return TransportRun(tuple(snaps), drift, cfl, "upwind1", np.asarray(sigma, dtype=float), diag)


# ----------------------------------------------------------------------------
# residual and recovery


@dataclass(frozen=True, eq=False)
class Residual:
    grid: GridSpec
    values: np.ndarray
    time: float

    @property
    def norm_inf(self) -> float:
        return float(np.max(np.abs(self.values)))

    @property
    def norm_l1(self) -> float:
        return float(np.abs(self.values).sum() * self.grid.cell_volume)


def _central_dt(run: TransportRun, index: int) -> tuple[np.ndarray, float]:
    k = int(index)
    if k < 0:
        k += len(run.snapshots)
    if not 0 < k < len(run.snapshots) - 1:
        raise ContractError("index needs a snapshot on both sides")
    t = run.times
    h1, h2 = t[k] - t[k - 1], t[k + 1] - t[k]
    if abs(h1 - h2) > 1e-9 * max(h1, h2):
        raise ContractError("snapshot spacing around the index is not uniform")
    dh = (t[k + 1] - t[k - 1]) / 2
    return (run.snapshots[k + 1].values - run.snapshots[k - 1].values) / (2 * dh), dh


def residual(field: VelocityField, run: TransportRun, index: int) -> Residual:
    """Cellwise ``d rho/dt + div(v rho)`` by central differences in time and space."""
    drho, _ = _central_dt(run, index)
    snap = run.snapshots[index]
    grid = snap.grid
    if field.dim != grid.dim:
        raise DimensionError(f"field dimension {field.dim} != grid dimension {grid.dim}")
    v = field(snap.time, grid.mesh())
    R = drho.copy()
    for a in range(grid.dim):
        q = np.pad(v[..., a] * snap.values, [(1, 1) if b == a else (0, 0) for b in range(grid.dim)])
        hi = [slice(None)] * grid.dim
        lo = [slice(None)] * grid.dim
        hi[a], lo[a] = slice(2, None), slice(None, -2)
        R += (q[tuple(hi)] - q[tuple(lo)]) / (2 * grid.widths[a])
    return Residual(grid, R, snap.time)


@dataclass(frozen=True, eq=False)
class Recovery:
    grid: GridSpec
    velocity: np.ndarray  # grid.shape + (dim,), NaN where masked
    mask: np.ndarray  # True where recovered
    time: float

    def relative_error(self, field: VelocityField, axis: int | None = None) -> float:
        """Max over the mask of |v_hat - v| / |v| (cells with v = 0 use the absolute error)."""
        v = field(self.time, self.grid.mesh())
        comps = range(v.shape[-1]) if axis is None else [axis]
        worst = 0.0
        for a in comps:
            m = self.mask[..., a] if self.mask.ndim > self.grid.dim else self.mask
            if not m.any():
                continue
            err = np.abs(self.velocity[..., a][m] - v[..., a][m])
            scale = np.abs(v[..., a][m])
            rel = np.where(scale > 0, err / np.where(scale > 0, scale, 1.0), err)
            worst = max(worst, float(rel.max()))
        return worst


def _flux_along(drho: np.ndarray, axis: int, w: float) -> np.ndarray:
    """Cell-centred ``-int_{-inf}^{x} d rho/dt du`` along ``axis``."""
    cum = np.cumsum(drho, axis=axis) * w
    return -(cum - 0.5 * w * drho)


def recover_velocity(runs, index: int | None = None, floor: float = RECOVERY_FLOOR) -> Recovery:
    """Velocity from density probes via ``v_j = -(int^{x_j} d rho/dt du_j) / rho``.

    ``runs`` is one run in 1D, or a sequence of ``dim`` runs where run ``j``
    uses a density that varies only along axis ``j``.  Cells with
    ``rho <= floor * max(rho)`` are masked.
    """
    if isinstance(runs, TransportRun):
        runs = [runs]
    runs = list(runs)
    grid = runs[0].grid
    if len(runs) != grid.dim:
        raise ContractError(f"need {grid.dim} probe run(s), got {len(runs)}")
    vel = np.full(grid.shape + (grid.dim,), np.nan)
    mask = np.zeros(grid.shape + (grid.dim,), dtype=bool)
    time = None
    for j, run in enumerate(runs):
        if run.grid != grid:
            raise ContractError("probe runs must share one grid")
        k = len(run.snapshots) - 2 if index is None else index
        drho, _ = _central_dt(run, k)
        rho = run.snapshots[k].values
        t = run.snapshots[k].time
        if time is None:
            time = t
        elif abs(t - time) > 1e-9:
            raise ContractError("probe runs must be evaluated at a common time")
        m = rho > floor * rho.max()
        flux = _flux_along(drho, j, grid.widths[j])
        vel[..., j] = np.where(m, flux / np.where(m, rho, 1.0), np.nan)
        mask[..., j] = m
    if not mask.any(axis=-1).any() or not all(mask[..., j].any() for j in range(grid.dim)):
        raise UnrecoverableError("every cell fell below the recovery floor")
    return Recovery(grid, vel, mask if grid.dim > 1 else mask, time)


def recover_divergence(run: TransportRun, index: int | None = None, floor: float = RECOVERY_FLOOR):
    """``div v = -(d rho/dt) / rho`` where the probe density is locally flat (wide box probe)."""
    k = len(run.snapshots) - 2 if index is None else index
    drho, _ = _central_dt(run, k)
    rho = run.snapshots[k].values
    m = rho > floor * rho.max()
    if not m.any():
        raise UnrecoverableError("every cell fell below the recovery floor")
    return np.where(m, -drho / np.where(m, rho, 1.0), np.nan), m


# ----------------------------------------------------------------------------
# serialization


def write_run(directory, run: TransportRun) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for k, snap in enumerate(run.snapshots):
        stem = directory / f"snapshot_{k:05d}"
        write_density(stem, snap)
        files.append(stem.name)
    manifest = {
        "field": run.field.describe() if run.field is not None else None,
        "cfl": run.cfl,
        "scheme": run.scheme,
        "sigma": None if run.sigma is None else np.asarray(run.sigma).tolist(),
        "times": run.times.tolist(),
        "snapshots": files,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_run(directory, field: VelocityField | None = None) -> TransportRun:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    snaps = tuple(read_density(directory / s) for s in manifest["snapshots"])
    sigma = manifest.get("sigma")
    return TransportRun(snaps, field, manifest["cfl"], manifest["scheme"],
                        None if sigma is None else np.asarray(sigma))
