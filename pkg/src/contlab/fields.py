"""Velocity fields, divergence, the material derivative and the shift series.

A :class:`VelocityField` wraps a vectorised function ``func(t, x)`` with
``x`` of shape ``(..., dim)``.  Built-in fields are written so that the same
function also accepts :class:`~contlab.series.Series` arguments; that makes
the function its own exact derivative oracle.  Fields without an oracle fall
back to nested central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Any, Callable

import numpy as np

from .errors import ContractError, DimensionError, UnsupportedOrderError
from .series import Series, as_series, series_exp, stack_last

__all__ = [
    "VelocityField",
    "ShiftSeries",
    "evaluate",
    "divergence",
    "apply_D",
    "shift_series",
    "flow_jet",
    "make_field",
    "FIELD_CATALOG",
    "custom_field",
]

#: Numeric nesting limit for the material derivative without an oracle.
MAX_NUMERIC_ORDER = 4
#: Base step of the numeric step cascade ``h_j = H0 ** (1 / j)``.
H0 = 1e-5


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Time-dependent velocity field ``v(t, x)`` on R^dim.

    ``derivative_oracle`` is a series-compatible version of ``func`` (for the
    built-ins it is ``func`` itself).  ``affine`` holds ``(A, b)`` when
    ``v(t, x) = A x + b`` exactly, which enables closed-form Gaussian
    transport.
    """

    dim: int
    func: Callable[[Any, Any], Any]
    derivative_oracle: Callable[[Any, Any], Any] | None = None
    sup_bound: float | None = None
    support: tuple[np.ndarray, np.ndarray] | None = None
    name: str = "custom"
    params: dict = dc_field(default_factory=dict)
    affine: tuple[np.ndarray, np.ndarray] | None = None
    vectorized: bool = True

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ContractError("field dimension must be positive")
        if self.sup_bound is not None and self.sup_bound < 0:
            raise ContractError("sup_bound must be nonnegative")

    def __call__(self, t, x):
        """Vectorised evaluation, ``x`` of shape ``(..., dim)``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise DimensionError(f"expected trailing dimension {self.dim}, got shape {x.shape}")
        if self.vectorized:
            out = np.asarray(self.func(t, x), dtype=float)
            out = np.broadcast_to(out, x.shape).copy() if out.shape != x.shape else out
        else:
            flat = x.reshape(-1, self.dim)
            out = np.array([np.asarray(self.func(t, row), dtype=float) for row in flat])
            out = out.reshape(x.shape)
        if self.support is not None:
            lo, hi = self.support
            outside = np.any((x < lo) | (x > hi), axis=-1)
            out = np.where(outside[..., None], 0.0, out)
        return out

    @property
    def has_oracle(self) -> bool:
        return self.derivative_oracle is not None

    def describe(self) -> dict:
        return {"name": self.name, "params": _jsonable(self.params)}


@dataclass(frozen=True, eq=False)
class ShiftSeries:
    """Truncated flow displacement ``g(x, t; s) = sum_j coefficients[j-1] s**j``."""

    base_point: np.ndarray
    base_time: float
    truncation: int
    coefficients: np.ndarray  # shape (J, ..., dim); row j-1 is D^j x / j!

    def __call__(self, s) -> np.ndarray:
        out = np.zeros_like(self.coefficients[0])
        for ck in self.coefficients[::-1]:
            out = (out + ck) * s
        return out

    def last_term(self, s) -> float:
        """Magnitude of the last retained term, a convergence diagnostic."""
        return float(np.max(np.abs(self.coefficients[-1])) * abs(s) ** self.truncation)


# ----------------------------------------------------------------------------
# core operations


def _point(field: VelocityField, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != field.dim:
        raise DimensionError(f"point has length {x.shape[-1]}, field dimension is {field.dim}")
    return x


def evaluate(field: VelocityField, t: float, x) -> np.ndarray:
    """Return ``v(t, x)``."""
    return field(t, _point(field, x))


def _oracle_eval(field: VelocityField, t, x):
    out = field.derivative_oracle(t, x)
    if not isinstance(out, Series):
        out = as_series(np.broadcast_to(np.asarray(out, dtype=float), x.shape), x.order)
    return out


def divergence(field: VelocityField, t: float, x, step: float = 1e-4, method: str = "auto"):
    """Divergence ``sum_j dv_j/dx_j`` at ``x`` (batched over leading axes).

    Uses the exact oracle when available (``method="auto"``/``"oracle"``),
    otherwise second-order central differences with spacing ``step``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    x = _point(field, x)
    use_oracle = method == "oracle" or (method == "auto" and field.has_oracle)
    if use_oracle and not field.has_oracle:
        raise ContractError(f"field {field.name!r} has no derivative oracle")
    total = np.zeros(x.shape[:-1])
    eye = np.eye(field.dim)
    for i in range(field.dim):
        if use_oracle:
            xs = Series.line(x, np.broadcast_to(eye[i], x.shape), 1)
            total = total + _oracle_eval(field, t, xs).c[1][..., i]
        else:
            e = eye[i] * step
            total = total + (field(t, x + e)[..., i] - field(t, x - e)[..., i]) / (2 * step)
    return total


def flow_jet(field: VelocityField, t: float, x, order: int) -> Series:
    """Exact Taylor jet of the trajectory through ``(t, x)`` up to ``order``.

    Picard iteration on truncated series: each sweep fixes one more
    coefficient of ``X(s) = x + int_0^s v(t + r, X(r)) dr``.
    """
    if not field.has_oracle:
        raise ContractError(f"field {field.name!r} has no derivative oracle")
    x = _point(field, x)
    T = Series.line(np.asarray(float(t)), np.asarray(1.0), order)
    X = Series.constant(x, order)
    for _ in range(order):
        V = _oracle_eval(field, T, X)
        X = V.integral() + x
    return X


def _numeric_D(field: VelocityField, f, order: int, h: float):
    """Return ``(t, x) -> (D^order f)(t, x)`` by nested central differences."""
    if order == 0:
        return f
    inner = _numeric_D(field, f, order - 1, h)
    eye = np.eye(field.dim)

    def Df(t, x):
        out = (np.asarray(inner(t + h, x)) - np.asarray(inner(t - h, x))) / (2 * h)
        v = field(t, x)
        for i in range(field.dim):
            e = eye[i] * h
            grad_i = (np.asarray(inner(t, x + e)) - np.asarray(inner(t, x - e))) / (2 * h)
            vi = v[..., i]
            if np.ndim(grad_i) > np.ndim(vi):
                vi = vi.reshape(vi.shape + (1,) * (np.ndim(grad_i) - np.ndim(vi)))
            out = out + vi * grad_i
        return out

    return Df


def apply_D(field: VelocityField, f, t: float, x, order: int, method: str = "auto", step: float | None = None):
    """Material derivative ``((d/dt + v . grad)^order f)(t, x)``.

    ``f(t, x)`` may be scalar- or vector-valued.  With an oracle the result is
    the ``order``-th derivative of ``s -> f(t + s, X(s))`` along the exact
    trajectory jet.  Without one, nested central differences with step
    ``H0 ** (1/order)`` are used up to :data:`MAX_NUMERIC_ORDER`.
    """
    if int(order) != order or order < 1:
        raise ContractError("order must be a positive integer")
    order = int(order)
    x = _point(field, x)
    if method not in ("auto", "oracle", "numeric"):
        raise ContractError(f"unknown method {method!r}")
    if method != "numeric" and field.has_oracle:
        X = flow_jet(field, t, x, order)
        T = Series.line(np.asarray(float(t)), np.asarray(1.0), order)
        try:
            val = f(T, X)
        except TypeError:
            if method == "oracle":
                raise
        else:
            if not isinstance(val, Series):
                return np.zeros(np.shape(val))
            return val.derivative(order)
    elif method == "oracle":
        raise ContractError(f"field {field.name!r} has no derivative oracle")
    if order > MAX_NUMERIC_ORDER:
        raise UnsupportedOrderError(
            f"order {order} exceeds numeric nesting limit {MAX_NUMERIC_ORDER}; supply a derivative oracle"
        )
    h = step if step is not None else H0 ** (1.0 / order)
    return np.asarray(_numeric_D(field, f, order, h)(t, x))


def shift_series(field: VelocityField, x, t: float, truncation: int, method: str = "auto") -> ShiftSeries:
    """Truncated power series of the flow displacement from ``(t, x)``.

    ``coefficients[j-1] = D^j x / j!`` for ``j = 1..truncation``; the first is
    ``v(t, x)``.
    """
    J = int(truncation)
    if J < 1:
        raise ContractError("truncation must be >= 1")
    x = _point(field, x)
    if method != "numeric" and field.has_oracle:
        X = flow_jet(field, t, x, J)
        coeffs = X.c[1:].copy()
    elif method == "oracle":
        raise ContractError(f"field {field.name!r} has no derivative oracle")
    else:
        if J - 1 > MAX_NUMERIC_ORDER:
            raise UnsupportedOrderError(
                f"truncation {J} needs numeric order {J - 1} > {MAX_NUMERIC_ORDER}"
            )
        coeffs = [field(t, x)]
        for j in range(2, J + 1):
            d = apply_D(field, lambda tt, xx: field(tt, xx), t, x, j - 1, method="numeric")
            coeffs.append(d / math.factorial(j))
        coeffs = np.stack(coeffs)
    return ShiftSeries(base_point=x, base_time=float(t), truncation=J, coefficients=coeffs)


# ----------------------------------------------------------------------------
# built-in catalog


def _as_vector(v, dim=None) -> np.ndarray:
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if dim is not None and v.shape != (dim,):
        raise ContractError(f"expected a vector of length {dim}, got shape {v.shape}")
    return v


def _affine_field(name, params, A, b, sup_bound=None) -> VelocityField:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.zeros(A.shape[0]) if b is None else _as_vector(b, A.shape[0])
    if A.shape[0] != A.shape[1]:
        raise ContractError("linear field needs a square matrix")
    At = A.T.copy()
    zero_A = not A.any()

    def func(t, x):
        if zero_A:
            return x * 0.0 + b
        return x @ At + b

    return VelocityField(
        dim=A.shape[0], func=func, derivative_oracle=func, sup_bound=sup_bound,
        name=name, params=params, affine=(A, b),
    )


def _constant(velocity=(0.0,)):
    c = _as_vector(velocity)
    return _affine_field("constant", {"velocity": c.tolist()}, np.zeros((c.size, c.size)), c,
                         sup_bound=float(np.max(np.abs(c))))


def _linear(matrix, offset=None):
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    params = {"matrix": A.tolist()}
    if offset is not None:
        params["offset"] = _as_vector(offset).tolist()
    return _affine_field("linear", params, A, offset)


def _rotation2d(omega=1.0):
    A = np.array([[0.0, -omega], [omega, 0.0]])
    return _affine_field("rotation2d", {"omega": float(omega)}, A, None)


def _damped(rate=1.0, dim=1):
    return _affine_field("damped", {"rate": float(rate), "dim": int(dim)}, -float(rate) * np.eye(int(dim)), None)


def _bump(center=(0.0,), radius=1.0, amplitude=(1.0,)):
    """Smooth compactly supported field ``a * exp(1 - 1/(1 - r^2))`` for r < 1."""
    c = _as_vector(center)
    a = _as_vector(amplitude, c.size) if np.size(amplitude) > 1 or c.size == 1 else np.full(c.size, float(amplitude))
    radius = float(radius)
    if radius <= 0:
        raise ContractError("bump radius must be positive")

    def func(t, x):
        z = (x - c) / radius
        q = (z * z).sum(axis=-1)
        if isinstance(q, Series):
            inside = q.value < 1.0
            q0 = Series(np.where(inside, q.c, 0.0))
            phi = series_exp(1.0 - 1.0 / (1.0 - q0))
            phi = Series(np.where(inside, phi.c, 0.0))
            return stack_last([phi * ai for ai in a])
        inside = q < 1.0
        qs = np.where(inside, q, 0.0)
        phi = np.where(inside, np.exp(1.0 - 1.0 / (1.0 - qs)), 0.0)
        return phi[..., None] * a

    return VelocityField(
        dim=c.size, func=func, derivative_oracle=func, sup_bound=float(np.max(np.abs(a))),
        support=(c - radius, c + radius), name="bump",
        params={"center": c.tolist(), "radius": radius, "amplitude": a.tolist()},
    )


def _polynomial(coefficients=(0.0, -1.0), dim=1):
    """Componentwise polynomial ``v_i(x) = sum_k a_k x_i**k``."""
    coeffs = [float(a) for a in np.atleast_1d(coefficients)]

    def func(t, x):
        out = x * 0.0 + coeffs[-1]
        for a in coeffs[-2::-1]:
            out = out * x + a
        return out

    return VelocityField(
        dim=int(dim), func=func, derivative_oracle=func, name="polynomial",
        params={"coefficients": coeffs, "dim": int(dim)},
    )


def _oscillating(rate=1.0, amplitude=1.0, frequency=1.0, dim=1):
    """Non-autonomous ``v = -rate * x + amplitude * sin(frequency * t)``."""

    def func(t, x):
        return -rate * x + amplitude * np.sin(frequency * t)

    return VelocityField(
        dim=int(dim), func=func, derivative_oracle=func, name="oscillating",
        params={"rate": float(rate), "amplitude": float(amplitude),
                "frequency": float(frequency), "dim": int(dim)},
    )


FIELD_CATALOG: dict[str, Callable[..., VelocityField]] = {
    "bump": _bump,
    "constant": _constant,
    "damped": _damped,
    "linear": _linear,
    "oscillating": _oscillating,
    "polynomial": _polynomial,
    "rotation2d": _rotation2d,
}


def make_field(name: str, **params) -> VelocityField:
    """Build a catalog field by name."""
    try:
        factory = FIELD_CATALOG[name]
    except KeyError:
        raise ContractError(f"unknown field {name!r}; choose from {sorted(FIELD_CATALOG)}") from None
    return factory(**params)


def custom_field(func, dim: int, *, exact: bool = False, vectorized: bool = True, **kwargs) -> VelocityField:
    """Wrap a user function; ``exact=True`` declares it series-compatible."""
    return VelocityField(
        dim=dim, func=func, derivative_oracle=func if exact else None, vectorized=vectorized, **kwargs
    )


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
