"""Ensemble propagation under the ODE and the generalised SDE.

Particles are processed in blocks of :data:`~contlab.noise.BLOCK_SIZE`.
Blocks are independent, so they may run on a thread pool; block ``b`` draws
its noise and initial samples from Philox stream ``b``, which keeps results
identical for any thread count.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import ContractError, DimensionError, DivergenceError
from .fields import VelocityField
from .noise import BLOCK_SIZE, BlockNoise, NoisePath, NoiseSpec, rng_stream

__all__ = [
    "Ensemble",
    "Trajectories",
    "SdeSpec",
    "Distribution",
    "DISTRIBUTION_KINDS",
    "time_grid",
    "integrate_ode",
    "integrate_sde",
    "ode_trajectories",
    "sde_trajectories",
    "sample_initial",
    "write_ensemble_csv",
    "read_ensemble_csv",
]

DISTRIBUTION_KINDS = ("delta_cloud", "gaussian", "uniform")


@dataclass(frozen=True, eq=False)
class Ensemble:
    """``n`` particle positions in R^dim at a common time."""

    time: float
    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.ndim != 2 or pos.shape[0] < 1:
            raise ContractError("ensemble needs positions of shape (n >= 1, dim)")
        if not np.all(np.isfinite(pos)):
            raise ContractError("ensemble positions must be finite")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "time", float(self.time))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True, eq=False)
class Trajectories:
    """Positions of the same particles at several times, shape (T, n, dim)."""

    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 3 or pos.shape[0] != times.size:
            raise ContractError("trajectory positions must have shape (len(times), n, dim)")
        if np.any(np.diff(times) <= 0):
            raise ContractError("trajectory times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", pos)

    @property
    def n(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    def at(self, k: int) -> Ensemble:
        return Ensemble(self.times[k], self.positions[k])

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > tol:
            raise ContractError(f"time {t} is not on the trajectory grid")
        return k


@dataclass(frozen=True, eq=False)
class SdeSpec:
    """``d xi = v*(t, xi) dt + sigma*(t, xi) dW``.

    ``diffusion`` is a scalar, a constant (dim, dim) matrix, or a callable
    ``(t, x) -> scalar | (n,) | (dim, dim) | (n, dim, dim)``.  ``noise`` is a
    :class:`NoiseSpec` or a pre-sampled :class:`NoisePath` (single path shared
    by every particle, or a bundle with one path per particle).
    """

    drift: VelocityField
    diffusion: Any = 0.0
    noise: NoiseSpec | NoisePath = dc_field(default_factory=NoiseSpec)
    noise_origin: float | None = None  # time at which W starts; default: start of integration

    def __post_init__(self):
        if isinstance(self.noise, NoiseSpec) and self.noise.dim != self.drift.dim:
            if callable(self.diffusion) or np.ndim(self.diffusion) != 2:
                raise DimensionError("noise dimension must match the drift unless diffusion is a matrix")
        if not callable(self.diffusion):
            d = np.asarray(self.diffusion, dtype=float)
            if not np.all(np.isfinite(d)):
                raise ContractError("diffusion must be finite")
            if d.ndim not in (0, 2):
                raise ContractError("constant diffusion must be a scalar or a matrix")

    @property
    def is_zero(self) -> bool:
        return not callable(self.diffusion) and not np.any(np.asarray(self.diffusion))


@dataclass(frozen=True)
class Distribution:
    """Initial distribution: ``gaussian(mean, cov)``, ``uniform(low, high)``, ``delta_cloud(center, radius)``."""

    kind: str
    mean: tuple | None = None
    cov: tuple | None = None
    low: tuple | None = None
    high: tuple | None = None
    center: tuple | None = None
    radius: float = 0.0

    def __post_init__(self):
        if self.kind not in DISTRIBUTION_KINDS:
            raise ContractError(f"unknown distribution {self.kind!r}; choose from {DISTRIBUTION_KINDS}")
        need = {"gaussian": ("mean", "cov"), "uniform": ("low", "high"), "delta_cloud": ("center",)}[self.kind]
        for name in need:
            if getattr(self, name) is None:
                raise ContractError(f"{self.kind} distribution needs {name!r}")
        if self.radius < 0:
            raise ContractError("radius must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> Distribution:
        d = dict(d)
        kind = d.pop("kind", None)
        unknown = set(d) - {"mean", "cov", "low", "high", "center", "radius"}
        if unknown:
            raise ContractError(f"unknown distribution keys {sorted(unknown)}")
        conv = {k: _freeze(v) for k, v in d.items() if k != "radius"}
        if "radius" in d:
            conv["radius"] = float(d["radius"])
        return cls(kind=kind, **conv)

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        for name in ("mean", "cov", "low", "high", "center"):
            val = getattr(self, name)
            if val is not None:
                out[name] = _thaw(val)
        if self.kind == "delta_cloud":
            out["radius"] = self.radius
        return out

    @property
    def dim(self) -> int:
        ref = {"gaussian": self.mean, "uniform": self.low, "delta_cloud": self.center}[self.kind]
        return int(np.atleast_1d(np.asarray(ref, dtype=float)).size)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact mean and covariance."""
        p = self.dim
        if self.kind == "gaussian":
            return _vec(self.mean, p), _mat(self.cov, p)
        if self.kind == "uniform":
            lo, hi = _vec(self.low, p), _vec(self.high, p)
            return (lo + hi) / 2, np.diag((hi - lo) ** 2 / 12)
        var = self.radius**2 / (p + 2)
        return _vec(self.center, p), var * np.eye(p)


def _freeze(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return tuple(_freeze(x) for x in v)
    return float(v)


def _thaw(v):
    if isinstance(v, tuple):
        return [_thaw(x) for x in v]
    return v


def _vec(v, p) -> np.ndarray:
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if a.size == 1 and p > 1:
        a = np.full(p, a.item())
    if a.shape != (p,):
        raise DimensionError(f"expected a vector of length {p}")
    return a


def _mat(m, p) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim == 0:
        a = a * np.eye(p)
    elif a.ndim == 1:
        a = np.diag(a) if a.size == p else a.reshape(p, p)
    if a.shape != (p, p):
        raise DimensionError(f"expected a {p}x{p} covariance")
    return a


# ----------------------------------------------------------------------------
# time stepping


def time_grid(t0: float, t_end: float, dt: float) -> np.ndarray:
    """Fixed-step grid from ``t0`` with the last step shortened to land on ``t_end``."""
    if dt <= 0:
        raise ContractError("dt must be positive")
    if t_end < t0:
        raise ContractError("t_end must not precede the start time")
    n = max(int(math.ceil((t_end - t0) / dt - 1e-9)), 0)
    times = t0 + dt * np.arange(n + 1, dtype=float)
    if n == 0:
        return np.array([t0]) if t_end == t0 else np.array([t0, t_end])
    times[-1] = t_end
    return times


def _grid_with_outputs(t0, t_end, dt, output_times):
    """Per-segment grids so every output time is hit exactly."""
    outs = sorted({float(t) for t in (output_times if output_times is not None else [t_end])} | {float(t_end)})
    if outs[0] < t0 - 1e-12 or outs[-1] > t_end + 1e-12:
        raise ContractError("output times must lie in [start, t_end]")
    grid = [np.array([t0])]
    start = t0
    for t in outs:
        if t <= start:
            continue
        grid.append(time_grid(start, t, dt)[1:])
        start = t
    grid = np.concatenate(grid)
    record = [int(np.argmin(np.abs(grid - t))) for t in outs]
    return grid, record, np.array(outs)


def _euler_step(field, t, x, h):
    return x + h * field(t, x)


def _rk4_step(field, t, x, h):
    k1 = field(t, x)
    k2 = field(t + h / 2, x + (h / 2) * k1)
    k3 = field(t + h / 2, x + (h / 2) * k2)
    k4 = field(t + h, x + h * k3)
    return x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


_STEPPERS = {"euler": _euler_step, "rk4": _rk4_step}


def _apply_diffusion(diffusion, t, x, dW):
    s = diffusion(t, x) if callable(diffusion) else diffusion
    s = np.asarray(s, dtype=float)
    if s.ndim == 0:
        return s * dW
    if s.ndim == 1:
        return s[:, None] * dW
    if s.ndim == 2:
        return dW @ s.T
    return np.einsum("nij,nj->ni", s, dW)


def _resolve_threads(threads) -> int:
    threads = 1 if threads is None else int(threads)
    if threads < 0:
        raise ContractError("threads must be nonnegative")
    return (os.cpu_count() or 1) if threads == 0 else threads


def _map_blocks(fn: Callable[[int, slice], Any], n: int, threads) -> list:
    slices = [slice(s, min(s + BLOCK_SIZE, n)) for s in range(0, n, BLOCK_SIZE)]
    workers = _resolve_threads(threads)
    if workers == 1 or len(slices) == 1:
        return [fn(b, sl) for b, sl in enumerate(slices)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(len(slices)), slices))


def _run(x0, grid, record, step_fn, offset) -> np.ndarray:
    """March one block along ``grid`` and store states at ``record`` indices."""
    out = np.empty((len(record),) + x0.shape)
    want = {k: i for i, k in enumerate(record)}
    x = x0
    if 0 in want:
        out[want[0]] = x
    for k in range(1, grid.size):
        x = step_fn(grid[k - 1], x, grid[k] - grid[k - 1])
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            raise DivergenceError(offset + int(np.argmax(bad)), float(grid[k]))
        if k in want:
            out[want[k]] = x
    return out


def _ode(field, e, t_end, dt, method, output_times, threads):
    if method not in _STEPPERS:
        raise ContractError(f"unknown method {method!r}; choose from {sorted(_STEPPERS)}")
    if e.dim != field.dim:
        raise DimensionError(f"ensemble dimension {e.dim} != field dimension {field.dim}")
    grid, record, outs = _grid_with_outputs(e.time, t_end, dt, output_times)
    stepper = _STEPPERS[method]

    def block(b, sl):
        return _run(e.positions[sl], grid, record, lambda t, x, h: stepper(field, t, x, h), sl.start)

    parts = _map_blocks(block, e.n, threads)
    return outs, np.concatenate(parts, axis=1)


def integrate_ode(field: VelocityField, e: Ensemble, t_end: float, dt: float, method: str = "rk4",
                  threads: int = 1) -> Ensemble:
    """Advance every particle with a fixed-step one-step method to exactly ``t_end``."""
    outs, pos = _ode(field, e, t_end, dt, method, None, threads)
    return Ensemble(outs[-1], pos[-1])


def ode_trajectories(field: VelocityField, e: Ensemble, t_end: float, dt: float, method: str = "rk4",
                     output_times=None, threads: int = 1) -> Trajectories:
    """As :func:`integrate_ode`, recording the ensemble at ``output_times`` (plus the start)."""
    outs = [e.time] + list(output_times if output_times is not None else [t_end])
    times, pos = _ode(field, e, t_end, dt, method, outs, threads)
    return Trajectories(times, pos)


def _sde(spec: SdeSpec, e, t_end, dt, output_times, threads, seed):
    field = spec.drift
    if e.dim != field.dim:
        raise DimensionError(f"ensemble dimension {e.dim} != drift dimension {field.dim}")
    grid, record, outs = _grid_with_outputs(e.time, t_end, dt, output_times)
    origin = e.time if spec.noise_origin is None else float(spec.noise_origin)
    if origin > e.time:
        raise ContractError("noise origin must not be later than the start time")
    zero = spec.is_zero

    def block(b, sl):
        x0 = e.positions[sl]
        if zero:
            return _run(x0, grid, record, lambda t, x, h: _euler_step(field, t, x, h), sl.start)
        inc = _increments(spec, b, sl, grid, origin, seed)

        def step(t, x, h, _it=iter(inc)):
            return x + h * field(t, x) + _apply_diffusion(spec.diffusion, t, x, next(_it))

        return _run(x0, grid, record, step, sl.start)

    parts = _map_blocks(block, e.n, threads)
    return outs, np.concatenate(parts, axis=1)


def _increments(spec: SdeSpec, b: int, sl: slice, grid: np.ndarray, origin: float, seed):
    """Generator of W increments over consecutive grid intervals for one block."""
    noise = spec.noise
    if isinstance(noise, NoisePath):
        vals = noise.at(grid)  # (T, d) or (n, T, d)
        if vals.ndim == 3:
            vals = np.moveaxis(vals[sl], 0, 1)
        for k in range(1, grid.size):
            yield np.broadcast_to(vals[k] - vals[k - 1], (sl.stop - sl.start, noise.dim))
        return
    sampler = BlockNoise(noise, sl.stop - sl.start, stream=b, seed=seed)
    if origin < grid[0]:
        sampler.step(grid[0] - origin)
    for k in range(1, grid.size):
        yield sampler.step(grid[k] - grid[k - 1])


def integrate_sde(spec: SdeSpec, e: Ensemble, t_end: float, dt: float, seed: int | None = None,
                  threads: int = 1) -> Ensemble:
    """Euler-Maruyama: ``x + v* dt + sigma*(t_n, x_n) (W(t_{n+1}) - W(t_n))``.

    Each particle gets its own noise path; ``seed`` overrides ``spec.noise.seed``.
    """
    outs, pos = _sde(spec, e, t_end, dt, None, threads, seed)
    return Ensemble(outs[-1], pos[-1])


def sde_trajectories(spec: SdeSpec, e: Ensemble, t_end: float, dt: float, output_times=None,
                     seed: int | None = None, threads: int = 1) -> Trajectories:
    outs = [e.time] + list(output_times if output_times is not None else [t_end])
    times, pos = _sde(spec, e, t_end, dt, outs, threads, seed)
    return Trajectories(times, pos)


# ----------------------------------------------------------------------------
# initial ensembles


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise ContractError("covariance must be symmetric")
    w, V = np.linalg.eigh((cov + cov.T) / 2)
    if w.min() < -1e-12 * max(1.0, abs(w.max())):
        raise ContractError("covariance must be positive semi-definite")
    return V * np.sqrt(np.clip(w, 0.0, None))


def sample_initial(dist: Distribution | dict, n: int, dim: int | None = None, seed: int = 0,
                   time: float = 0.0) -> Ensemble:
    """``n`` i.i.d. draws from ``dist``, deterministic given ``seed``."""
    if isinstance(dist, dict):
        dist = Distribution.from_dict(dist)
    if n < 1:
        raise ContractError("n must be at least 1")
    p = dist.dim if dim is None else int(dim)
    if dim is not None and dist.dim not in (1, p):
        raise DimensionError(f"distribution dimension {dist.dim} != {p}")
    out = np.empty((n, p))
    if dist.kind == "gaussian":
        mean, L = _vec(dist.mean, p), _psd_factor(_mat(dist.cov, p))
    elif dist.kind == "uniform":
        lo, hi = _vec(dist.low, p), _vec(dist.high, p)
        if np.any(hi <= lo):
            raise ContractError("uniform box needs low < high")
    else:
        center = _vec(dist.center, p)
    for b, start in enumerate(range(0, n, BLOCK_SIZE)):
        m = min(BLOCK_SIZE, n - start)
        rng = rng_stream(seed, b)
        if dist.kind == "gaussian":
            blk = mean + rng.standard_normal((m, p)) @ L.T
        elif dist.kind == "uniform":
            blk = lo + (hi - lo) * rng.random((m, p))
        elif dist.radius == 0:
            blk = np.broadcast_to(center, (m, p))
        else:
            d = rng.standard_normal((m, p))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            r = dist.radius * rng.random(m) ** (1.0 / p)
            blk = center + r[:, None] * d
        out[start:start + m] = blk
    return Ensemble(time, out)


# ----------------------------------------------------------------------------
# I/O


def write_ensemble_csv(path, data: Ensemble | Trajectories) -> None:
    """CSV with header ``t,particle_id,x_1..x_p``."""
    if isinstance(data, Ensemble):
        data = Trajectories([data.time], data.positions[None])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "particle_id"] + [f"x_{i + 1}" for i in range(data.dim)])
        for t, snap in zip(data.times, data.positions):
            ts = repr(float(t))
            for i, row in enumerate(snap):
                w.writerow([ts, i] + [repr(float(v)) for v in row])


def read_ensemble_csv(path) -> Trajectories:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[:2] != ["t", "particle_id"]:
        raise ContractError(f"bad ensemble header {header}")
    data = np.array(rows[1:], dtype=float)
    times = np.unique(data[:, 0])
    n = int(data[:, 1].max()) + 1
    pos = np.empty((times.size, n, data.shape[1] - 2))
    k = np.searchsorted(times, data[:, 0])
    pos[k, data[:, 1].astype(int)] = data[:, 2:]
    return Trajectories(times, pos)
