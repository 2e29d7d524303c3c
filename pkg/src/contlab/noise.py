"""Driving processes W(t) for the generalised stochastic motion.

Supported kinds are ``zero``, ``brownian`` and ``poly_brownian`` with
``W = |B|**k * B`` for an even power ``k``.  Every process starts at the
origin at the first time of its grid.

Random numbers come from numpy's Philox-4x64 counter-based generator.  A
stream is addressed by the 128-bit key ``(seed, stream)``; replicate ``i``
lives in stream ``i // BLOCK_SIZE`` at row ``i % BLOCK_SIZE``, so results do
not depend on how blocks are scheduled across threads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError

__all__ = [
    "BLOCK_SIZE",
    "NOISE_KINDS",
    "NoiseSpec",
    "NoisePath",
    "IncrementVariance",
    "rng_stream",
    "BlockNoise",
    "sample_paths",
    "sample_path",
    "increment_variance",
    "write_path_csv",
    "read_path_csv",
]

BLOCK_SIZE = 4096
NOISE_KINDS = ("brownian", "poly_brownian", "zero")
_UINT64 = 2**64


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator keyed by ``(seed, stream)``."""
    seed = int(seed)
    if not 0 <= seed < _UINT64:
        raise ContractError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.Philox(key=seed + (int(stream) << 64)))


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "brownian"
    dim: int = 1
    seed: int = 0
    power: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ContractError(f"unknown noise kind {self.kind!r}; choose from {NOISE_KINDS}")
        if self.dim < 1:
            raise ContractError("noise dimension must be positive")
        if self.kind == "poly_brownian" and (self.power < 0 or self.power % 2):
            raise ContractError("poly_brownian power must be an even nonnegative integer")
        if not 0 <= int(self.seed) < _UINT64:
            raise ContractError("seed must be a 64-bit unsigned integer")

    def transform(self, B: np.ndarray) -> np.ndarray:
        """Map Brownian values to W."""
        if self.kind == "zero":
            return np.zeros_like(B)
        if self.kind == "brownian" or self.power == 0:
            return B
        norm = np.sqrt(np.sum(B * B, axis=-1, keepdims=True))
        return norm**self.power * B

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "seed": int(self.seed), "power": self.power}


@dataclass(frozen=True, eq=False)
class NoisePath:
    """A sampled trajectory; ``values`` has shape (T, dim), or (n, T, dim) for a bundle."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if times.ndim != 1 or values.ndim not in (2, 3) or values.shape[-2] != times.size:
            raise ContractError("times and values lengths disagree")
        if np.any(np.diff(times) <= 0):
            raise ContractError("noise path times must be strictly increasing")
        if np.any(values[..., 0, :] != 0):
            raise ContractError("noise path must start at the origin")

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def at(self, t) -> np.ndarray:
        """Linear interpolation at time(s) ``t``.

        Returns shape ``t.shape + (dim,)`` for a single path and
        ``(n,) + t.shape + (dim,)`` for a bundle.
        """
        t = np.asarray(t, dtype=float)
        if np.any(t < self.times[0]) or np.any(t > self.times[-1]):
            raise ContractError("time outside the sampled noise path")
        rows = np.moveaxis(self.values, -2, -1).reshape(-1, self.times.size)
        out = np.stack([np.interp(t, self.times, r) for r in rows], axis=-1)
        out = out.reshape(t.shape + self.values.shape[:-2] + (self.dim,))
        return np.moveaxis(out, t.ndim, 0) if self.values.ndim == 3 else out


class BlockNoise:
    """Incremental sampler for one block of independent replicates."""

    def __init__(self, spec: NoiseSpec, size: int, stream: int, seed: int | None = None):
        self.spec = spec
        self.size = size
        self.gen = rng_stream(spec.seed if seed is None else seed, stream)
        self.B = np.zeros((size, spec.dim))
        self.W = np.zeros((size, spec.dim))

    def step(self, dt: float) -> np.ndarray:
        """Advance by ``dt`` and return the increment of W."""
        if self.spec.kind == "zero":
            return np.zeros((self.size, self.spec.dim))
        dB = self.gen.standard_normal((self.size, self.spec.dim)) * np.sqrt(dt)
        self.B = self.B + dB
        if self.spec.kind == "brownian" or self.spec.power == 0:
            self.W = self.B
            return dB
        W_new = self.spec.transform(self.B)
        dW = W_new - self.W
        self.W = W_new
        return dW


def _check_grid(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1:
        raise ContractError("time grid must be a non-empty 1-d sequence")
    if np.any(np.diff(times) <= 0):
        raise ContractError("time grid must be strictly increasing")
    return times


def sample_paths(spec: NoiseSpec, times, n: int, seed: int | None = None) -> np.ndarray:
    """``n`` independent paths on ``times``; array of shape (n, T, dim)."""
    times = _check_grid(times)
    if n < 1:
        raise ContractError("need at least one path")
    out = np.zeros((n, times.size, spec.dim))
    dts = np.diff(times)
    for b, start in enumerate(range(0, n, BLOCK_SIZE)):
        stop = min(start + BLOCK_SIZE, n)
        block = BlockNoise(spec, stop - start, stream=b, seed=seed)
        for k, dt in enumerate(dts, start=1):
            block.step(dt)
            out[start:stop, k] = block.W
    return out


def sample_path(spec: NoiseSpec, times) -> NoisePath:
    """One path on ``times`` (replicate 0 of :func:`sample_paths`)."""
    times = _check_grid(times)
    return NoisePath(times=times, values=sample_paths(spec, times, 1)[0])


@dataclass(frozen=True, eq=False)
class IncrementVariance:
    cov: np.ndarray
    stderr: np.ndarray
    mean: np.ndarray
    n: int


def increment_variance(spec: NoiseSpec, t: float, delta: float, n_mc: int, seed: int | None = None) -> IncrementVariance:
    """Monte Carlo estimate of ``Var(W(t + delta) - W(t))`` for a process started at 0."""
    if delta <= 0:
        raise ContractError("delta must be positive")
    if n_mc < 1000:
        raise ContractError("n_mc must be at least 1000")
    if t < 0:
        raise ContractError("t must be nonnegative")
    grid = [0.0, t + delta] if t == 0 else [0.0, t, t + delta]
    paths = sample_paths(spec, grid, n_mc, seed=seed)
    inc = paths[:, -1] - paths[:, -2]
    mean = inc.mean(axis=0)
    dev = inc - mean
    prod = dev[:, :, None] * dev[:, None, :]
    cov = prod.sum(axis=0) / (n_mc - 1)
    stderr = prod.std(axis=0, ddof=1) / np.sqrt(n_mc)
    return IncrementVariance(cov=cov, stderr=stderr, mean=mean, n=n_mc)


def write_path_csv(path, noise_path: NoisePath) -> None:
    if noise_path.values.ndim != 2:
        raise ContractError("only single paths can be written")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"w_{i + 1}" for i in range(noise_path.dim)])
        for t, row in zip(noise_path.times, noise_path.values):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_path_csv(path) -> NoisePath:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "t" or any(h != f"w_{i + 1}" for i, h in enumerate(header[1:])):
        raise ContractError(f"bad noise path header {header}")
    data = np.array(body, dtype=float)
    return NoisePath(times=data[:, 0], values=data[:, 1:])
