"""Experiment configuration: parsing, validation and canonical serialisation."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

from .errors import ConfigError, ContlabError
from .fields import FIELD_CATALOG, VelocityField, make_field
from .noise import NOISE_KINDS, NoiseSpec
from .particles import DISTRIBUTION_KINDS, Distribution

__all__ = ["EXPERIMENTS", "SCALING_CHECKS", "ExperimentConfig", "parse_config", "load_config", "build_field"]

EXPERIMENTS = ("detect", "moments", "recover", "residual", "reynolds", "scaling", "simulate", "solve")
SCALING_CHECKS = ("concentration", "conservation", "dual_expansion", "noise_variance", "rank_preservation",
                  "rk4_order", "shift_series")

_TOP_KEYS = {"experiment", "name", "field", "initial", "grid", "time", "noise", "diffusion", "seeds",
             "n_particles", "params", "threads", "output_dir"}
_TIME_DEFAULTS = {"t0": 0.0, "t_end": 1.0, "dt": 1e-3, "cfl": 0.9, "output_times": None, "method": "rk4"}
_SEED_DEFAULTS = {"initial": 0, "noise": 1, "bootstrap": 2}
_NEEDS = {
    "simulate": ("field", "initial"),
    "solve": ("field", "initial", "grid"),
    "residual": ("field", "initial", "grid"),
    "recover": ("field", "initial", "grid"),
    "reynolds": ("field", "initial", "grid"),
    "moments": ("field",),
    "detect": ("field", "initial"),
    "scaling": (),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved configuration; every field holds JSON-compatible data."""

    experiment: str
    name: str
    field: dict | None
    initial: dict | None
    grid: dict | None
    time: dict
    noise: dict | None
    diffusion: object
    seeds: dict
    n_particles: int
    params: dict
    threads: int
    output_dir: str

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "name": self.name,
            "field": copy.deepcopy(self.field),
            "initial": copy.deepcopy(self.initial),
            "grid": copy.deepcopy(self.grid),
            "time": dict(self.time),
            "noise": copy.deepcopy(self.noise),
            "diffusion": copy.deepcopy(self.diffusion),
            "seeds": dict(self.seeds),
            "n_particles": self.n_particles,
            "params": copy.deepcopy(self.params),
            "threads": self.threads,
            "output_dir": self.output_dir,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # convenience builders -------------------------------------------------

    def build_field(self) -> VelocityField:
        return build_field(self.field, "field")

    def distribution(self) -> Distribution:
        return Distribution.from_dict(self.initial)

    def noise_spec(self) -> NoiseSpec | None:
        if self.noise is None:
            return None
        return NoiseSpec(kind=self.noise["kind"], dim=self.noise.get("dim", 1),
                         seed=self.seeds["noise"], power=self.noise.get("power", 0))

    def axes(self) -> tuple:
        return tuple(tuple(a) for a in self.grid["axes"])


def build_field(spec: dict, key: str = "field") -> VelocityField:
    if not isinstance(spec, dict) or "name" not in spec:
        raise ConfigError(key, "expected an object with a 'name'")
    name = spec["name"]
    if name not in FIELD_CATALOG:
        raise ConfigError(f"{key}.name", f"unknown field {name!r}; choose from {sorted(FIELD_CATALOG)}")
    try:
        return make_field(name, **spec.get("params", {}))
    except (TypeError, ContlabError, ValueError) as exc:
        raise ConfigError(f"{key}.params", str(exc)) from None


def _num(value, key, kind=float, positive=False, nonneg=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if kind is int and int(value) != value:
        raise ConfigError(key, f"expected an integer, got {value!r}")
    value = kind(value)
    if positive and value <= 0:
        raise ConfigError(key, "must be positive")
    if nonneg and value < 0:
        raise ConfigError(key, "must be nonnegative")
    return value


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping and fill defaults; errors name the offending key."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment {exp!r}; choose from {list(EXPERIMENTS)}")
    for key in _NEEDS[exp]:
        if raw.get(key) is None:
            raise ConfigError(key, f"required for experiment {exp!r}")

    field = raw.get("field")
    if field is not None:
        if set(field) - {"name", "params"}:
            raise ConfigError("field", f"unknown keys {sorted(set(field) - {'name', 'params'})}")
        field = {"name": field.get("name"), "params": dict(field.get("params", {}))}
        built = build_field(field)
        field["params"] = dict(built.params)  # canonical, with defaults
    initial = raw.get("initial")
    if initial is not None:
        if initial.get("kind") not in DISTRIBUTION_KINDS:
            raise ConfigError("initial.kind", f"choose from {list(DISTRIBUTION_KINDS)}")
        try:
            initial = Distribution.from_dict(initial).to_dict()
        except ContlabError as exc:
            raise ConfigError("initial", str(exc)) from None
    grid = raw.get("grid")
    if grid is not None:
        axes = grid.get("axes") if isinstance(grid, dict) else None
        if not isinstance(axes, list) or not axes:
            raise ConfigError("grid.axes", "expected a list of [lo, hi, n] triples")
        norm = []
        for i, a in enumerate(axes):
            if not isinstance(a, list) or len(a) != 3:
                raise ConfigError(f"grid.axes[{i}]", "expected [lo, hi, n]")
            lo = _num(a[0], f"grid.axes[{i}][0]")
            hi = _num(a[1], f"grid.axes[{i}][1]")
            n = _num(a[2], f"grid.axes[{i}][2]", int, positive=True)
            if hi <= lo:
                raise ConfigError(f"grid.axes[{i}]", "upper edge must exceed lower edge")
            norm.append([lo, hi, n])
        grid = {"axes": norm}

    time = dict(_TIME_DEFAULTS)
    traw = raw.get("time", {})
    if set(traw) - set(_TIME_DEFAULTS):
        raise ConfigError("time." + sorted(set(traw) - set(_TIME_DEFAULTS))[0], "unknown key")
    time.update(traw)
    for k in ("t0", "t_end"):
        time[k] = _num(time[k], f"time.{k}")
    time["dt"] = _num(time["dt"], "time.dt", positive=True)
    time["cfl"] = _num(time["cfl"], "time.cfl", positive=True)
    if time["cfl"] > 1:
        raise ConfigError("time.cfl", "must lie in (0, 1]")
    if time["t_end"] < time["t0"]:
        raise ConfigError("time.t_end", "must not precede time.t0")
    if time["method"] not in ("euler", "rk4"):
        raise ConfigError("time.method", "choose 'euler' or 'rk4'")
    if time["output_times"] is not None:
        time["output_times"] = [_num(t, "time.output_times") for t in time["output_times"]]

    noise = raw.get("noise")
    if noise is not None:
        if noise.get("kind") not in NOISE_KINDS:
            raise ConfigError("noise.kind", f"unknown noise kind {noise.get('kind')!r}; choose from {list(NOISE_KINDS)}")
        if set(noise) - {"kind", "power", "dim", "origin"}:
            raise ConfigError("noise", "unknown keys")
        noise = {"kind": noise["kind"], "power": _num(noise.get("power", 0), "noise.power", int, nonneg=True),
                 "dim": _num(noise.get("dim", 1), "noise.dim", int, positive=True),
                 "origin": None if noise.get("origin") is None else _num(noise["origin"], "noise.origin")}
        if noise["kind"] == "poly_brownian" and noise["power"] % 2:
            raise ConfigError("noise.power", "must be even")

    diffusion = raw.get("diffusion", 0.0)
    if isinstance(diffusion, list):
        diffusion = [[_num(v, "diffusion") for v in row] for row in diffusion]
    else:
        diffusion = _num(diffusion, "diffusion")

    seeds = dict(_SEED_DEFAULTS)
    sraw = raw.get("seeds", {})
    if isinstance(sraw, int) and not isinstance(sraw, bool):
        sraw = {"initial": sraw}
    if not isinstance(sraw, dict):
        raise ConfigError("seeds", "expected an object of named seeds")
    seeds.update(sraw)
    for k, v in seeds.items():
        seeds[k] = _num(v, f"seeds.{k}", int, nonneg=True)
        if seeds[k] >= 2**64:
            raise ConfigError(f"seeds.{k}", "must fit in 64 bits")

    params = raw.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("params", "expected an object")
    if exp == "scaling":
        checks = params.get("check")
        checks = [checks] if isinstance(checks, str) else checks
        if not checks or any(c not in SCALING_CHECKS for c in checks):
            raise ConfigError("params.check", f"choose from {list(SCALING_CHECKS)}")
    for key in ("hypothesis", "wrong_field"):
        if key in params:
            build_field(params[key], f"params.{key}")

    return ExperimentConfig(
        experiment=exp,
        name=str(raw.get("name", exp)),
        field=field,
        initial=initial,
        grid=grid,
        time=time,
        noise=noise,
        diffusion=diffusion,
        seeds=seeds,
        n_particles=_num(raw.get("n_particles", 10_000), "n_particles", int, positive=True),
        params=copy.deepcopy(params),
        threads=_num(raw.get("threads", 1), "threads", int, nonneg=True),
        output_dir=str(raw.get("output_dir", "output")),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return parse_config(raw)
