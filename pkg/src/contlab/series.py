"""Truncated Taylor series in one scalar variable.

A :class:`Series` holds coefficients ``c[k]`` of ``sum_k c[k] * s**k`` up to a
fixed order, where every ``c[k]`` is an array of a common value shape.  The
arithmetic is exact up to that order, which is what the built-in velocity
fields use as their derivative oracle: evaluating a field on a series
argument ``x + s*d`` yields exact directional derivatives, and Picard
iteration on series yields the exact Taylor jet of a trajectory.

Only the operations needed by smooth closed-form fields are supported.
Anything else (comparisons, ``np.where``, ``abs``) raises ``TypeError``, which
callers treat as "no exact route available".
"""

from __future__ import annotations

import numpy as np

__all__ = ["Series", "as_series", "stack_last", "series_exp"]


class Series:
    __array_priority__ = 1000

    def __init__(self, coeffs):
        c = np.asarray(coeffs, dtype=float)
        if c.ndim < 1:
            raise ValueError("coefficient array needs a leading order axis")
        self.c = c

    # construction -----------------------------------------------------------

    @classmethod
    def constant(cls, value, order: int) -> Series:
        value = np.asarray(value, dtype=float)
        c = np.zeros((order + 1,) + value.shape)
        c[0] = value
        return cls(c)

    @classmethod
    def line(cls, value, direction, order: int) -> Series:
        """The series ``value + s * direction``."""
        value, direction = np.broadcast_arrays(
            np.asarray(value, dtype=float), np.asarray(direction, dtype=float)
        )
        c = np.zeros((order + 1,) + value.shape)
        c[0] = value
        if order >= 1:
            c[1] = direction
        return cls(c)

    # basic properties -------------------------------------------------------

    @property
    def order(self) -> int:
        return self.c.shape[0] - 1

    @property
    def shape(self):
        return self.c.shape[1:]

    @property
    def ndim(self) -> int:
        return self.c.ndim - 1

    @property
    def value(self) -> np.ndarray:
        return self.c[0]

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        return f"Series(order={self.order}, shape={self.shape})"

    def derivative(self, k: int) -> np.ndarray:
        """k-th derivative with respect to s at s = 0."""
        return self.c[k] * float(np.prod(np.arange(1, k + 1)))

    def evaluate(self, s) -> np.ndarray:
        out = np.zeros_like(self.c[0])
        for ck in self.c[::-1]:
            out = out * s + ck
        return out

    def integral(self) -> Series:
        """Antiderivative vanishing at s = 0, truncated to the same order."""
        c = np.zeros_like(self.c)
        k = np.arange(1, self.order + 1).reshape((-1,) + (1,) * self.ndim)
        c[1:] = self.c[:-1] / k
        return Series(c)

    # indexing ---------------------------------------------------------------

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Series(self.c[(slice(None),) + idx])

    def sum(self, axis=None, **kwargs):
        if kwargs.get("out") is not None:
            raise TypeError("out= is not supported for Series")
        if axis is None:
            axis = tuple(range(1, self.c.ndim))
        elif isinstance(axis, tuple):
            axis = tuple(a + 1 if a >= 0 else a for a in axis)
        else:
            axis = axis + 1 if axis >= 0 else axis
        return Series(self.c.sum(axis=axis, keepdims=kwargs.get("keepdims", False)))

    # arithmetic -------------------------------------------------------------

    def _coerce(self, other) -> Series:
        if isinstance(other, Series):
            if other.order != self.order:
                raise ValueError("series orders differ")
            return other
        return Series.constant(other, self.order)

    def __neg__(self):
        return Series(-self.c)

    def __pos__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Series):
            a, b = _aligned(self.c, self._coerce(other).c)
            return Series(a + b)
        other = np.asarray(other, dtype=float)
        c = _lift(self.c, other.ndim) + np.zeros_like(other)
        c[0] = c[0] + other
        return Series(c)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other if isinstance(other, Series) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Series):
            other = np.asarray(other, dtype=float)
            return Series(_lift(self.c, other.ndim) * other)
        a, b = _aligned(self.c, self._coerce(other).c)
        shape = np.broadcast_shapes(a.shape[1:], b.shape[1:])
        out = np.zeros((self.order + 1,) + shape)
        for k in range(self.order + 1):
            out[k] = np.einsum("i...,i...->...", a[: k + 1], b[k::-1]) if k else a[0] * b[0]
        return Series(out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Series):
            other = np.asarray(other, dtype=float)
            return Series(_lift(self.c, other.ndim) / other)
        return self * other._reciprocal()

    def __rtruediv__(self, other):
        return self._reciprocal() * other

    def _reciprocal(self) -> Series:
        d = self.c
        out = np.zeros_like(d)
        out[0] = 1.0 / d[0]
        for k in range(1, self.order + 1):
            acc = np.einsum("i...,i...->...", d[1 : k + 1], out[k - 1 :: -1]) if k > 1 else d[1] * out[0]
            out[k] = -acc / d[0]
        return Series(out)

    def __pow__(self, exponent):
        if isinstance(exponent, Series):
            return series_exp(series_log(self) * exponent)
        e = float(exponent)
        if e.is_integer():
            n = int(e)
            if n < 0:
                return (self ** (-n))._reciprocal()
            result = Series.constant(np.ones(self.shape), self.order)
            base = self
            while n:
                if n & 1:
                    result = result * base
                n >>= 1
                if n:
                    base = base * base
            return result
        return series_exp(series_log(self) * e)

    def __matmul__(self, matrix):
        if isinstance(matrix, Series):
            raise TypeError("series @ series is not supported")
        return Series(np.matmul(self.c, np.asarray(matrix, dtype=float)))

    def __rmatmul__(self, matrix):
        if self.ndim != 1:
            raise TypeError("matrix @ series needs a one-dimensional series")
        return Series(self.c @ np.asarray(matrix, dtype=float).T)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None:
            return NotImplemented
        binary = {
            np.add: lambda a, b: a + b,
            np.subtract: lambda a, b: a - b,
            np.multiply: lambda a, b: a * b,
            np.true_divide: lambda a, b: a / b,
            np.power: lambda a, b: a**b,
            np.matmul: lambda a, b: a @ b,
        }
        unary = {
            np.negative: lambda a: -a,
            np.positive: lambda a: a,
            np.square: lambda a: a * a,
            np.exp: series_exp,
            np.log: series_log,
            np.sqrt: series_sqrt,
            np.sin: lambda a: series_sincos(a)[0],
            np.cos: lambda a: series_sincos(a)[1],
        }
        if ufunc in binary and len(inputs) == 2:
            a, b = inputs
            if not isinstance(a, Series):
                if ufunc is np.matmul:
                    return b.__rmatmul__(a)
                if ufunc is np.power:
                    return NotImplemented
                a = b._coerce(a)
            return binary[ufunc](a, b)
        if ufunc in unary and len(inputs) == 1:
            return unary[ufunc](inputs[0])
        return NotImplemented

    # comparisons have no truncated-series meaning
    def __lt__(self, other):
        raise TypeError("Series does not support ordering")

    __le__ = __gt__ = __ge__ = __lt__

    def __bool__(self):
        raise TypeError("truth value of a Series is undefined")

    def __float__(self):
        raise TypeError("cannot convert a Series to float")


def _lift(c: np.ndarray, ndim: int) -> np.ndarray:
    """Insert singleton value axes so ``c`` broadcasts against rank-``ndim`` values."""
    missing = ndim - (c.ndim - 1)
    if missing <= 0:
        return c
    return c.reshape((c.shape[0],) + (1,) * missing + c.shape[1:])


def _aligned(a: np.ndarray, b: np.ndarray):
    ndim = max(a.ndim, b.ndim) - 1
    return _lift(a, ndim), _lift(b, ndim)


def as_series(x, order: int) -> Series:
    return x if isinstance(x, Series) else Series.constant(x, order)


def stack_last(items) -> Series | np.ndarray:
    """``np.stack(items, axis=-1)`` that also accepts series entries."""
    orders = {it.order for it in items if isinstance(it, Series)}
    if not orders:
        return np.stack([np.asarray(it, dtype=float) for it in items], axis=-1)
    if len(orders) > 1:
        raise ValueError("series orders differ")
    order = orders.pop()
    parts = [as_series(it, order).c for it in items]
    parts = np.broadcast_arrays(*parts)
    return Series(np.stack(parts, axis=-1))


def series_exp(a: Series) -> Series:
    a = a if isinstance(a, Series) else Series.constant(a, 0)
    out = np.zeros_like(a.c)
    out[0] = np.exp(a.c[0])
    for k in range(1, a.order + 1):
        i = np.arange(1, k + 1).reshape((-1,) + (1,) * a.ndim)
        out[k] = np.sum(i * a.c[1 : k + 1] * out[k - 1 :: -1][:k], axis=0) / k
    return Series(out)


def series_log(a: Series) -> Series:
    out = np.zeros_like(a.c)
    out[0] = np.log(a.c[0])
    for k in range(1, a.order + 1):
        acc = a.c[k].copy()
        for i in range(1, k):
            acc = acc - i * out[i] * a.c[k - i] / k
        out[k] = acc / a.c[0]
    return Series(out)


def series_sqrt(a: Series) -> Series:
    if np.any(a.c[0] <= 0) and a.order > 0:
        raise ValueError("sqrt series needs a positive leading term")
    out = np.zeros_like(a.c)
    out[0] = np.sqrt(a.c[0])
    for k in range(1, a.order + 1):
        acc = a.c[k].copy()
        for i in range(1, k):
            acc = acc - out[i] * out[k - i]
        out[k] = acc / (2.0 * out[0])
    return Series(out)


def series_sincos(a: Series):
    s = np.zeros_like(a.c)
    c = np.zeros_like(a.c)
    s[0], c[0] = np.sin(a.c[0]), np.cos(a.c[0])
    for k in range(1, a.order + 1):
        i = np.arange(1, k + 1).reshape((-1,) + (1,) * a.ndim)
        s[k] = np.sum(i * a.c[1 : k + 1] * c[k - 1 :: -1][:k], axis=0) / k
        c[k] = -np.sum(i * a.c[1 : k + 1] * s[k - 1 :: -1][:k], axis=0) / k
    return Series(s), Series(c)
