"""Truncated multivariate Taylor jets in the input coordinates.

A jet of order ``K`` in ``d`` variables stores the normalised Taylor
coefficients ``f_alpha = d^alpha f / alpha!`` for every multi-index with
``|alpha| <= K``. Coefficients live on the leading axis of a :class:`Var`, so a
whole batch of expansion points (and hidden units) is propagated at once and
every coefficient stays differentiable with respect to model parameters.

Multi-indices are kept in graded order, which makes the index set of a lower
order a prefix of a higher one: truncation is a slice.
"""

from __future__ import annotations

from functools import lru_cache
from math import comb, factorial

import numpy as np

from ..errors import ShapeError, UnsupportedOrderError
from . import tape as T
from .tape import Var, _record, as_var

MAX_ORDER = 3


@lru_cache(maxsize=None)
def multi_indices(dims: int, order: int) -> tuple:
    """All multi-indices with total degree ``<= order``, graded then lexicographic (descending)."""
    out = []
    for deg in range(order + 1):
        out.extend(_compositions(deg, dims))
    return tuple(out)


def _compositions(total, parts):
    if parts == 1:
        return [(total,)]
    res = []
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            res.append((first,) + rest)
    return res


def n_coeffs(dims: int, order: int) -> int:
    return comb(dims + order, order)


@lru_cache(maxsize=None)
def _index_of(dims: int, order: int) -> dict:
    return {alpha: k for k, alpha in enumerate(multi_indices(dims, order))}


@lru_cache(maxsize=None)
def _product_tables(dims: int, order: int):
    """Selection matrices for the truncated Cauchy product."""
    idx = multi_indices(dims, order)
    pos = _index_of(dims, order)
    pairs = []
    for ia, a in enumerate(idx):
        for ib, b in enumerate(idx):
            g = tuple(x + y for x, y in zip(a, b))
            if sum(g) <= order:
                pairs.append((ia, ib, pos[g]))
    c, p = len(idx), len(pairs)
    sel_a = np.zeros((p, c))
    sel_b = np.zeros((p, c))
    gather = np.zeros((c, p))
    for k, (ia, ib, ig) in enumerate(pairs):
        sel_a[k, ia] = 1.0
        sel_b[k, ib] = 1.0
        gather[ig, k] = 1.0
    return sel_a, sel_b, gather


@lru_cache(maxsize=None)
def _derivative_matrix(dims: int, order: int, axis: int) -> np.ndarray:
    """Map order-``K`` coefficients of f to order-``K-1`` coefficients of df/dx_axis."""
    lo = multi_indices(dims, order - 1)
    pos = _index_of(dims, order)
    mat = np.zeros((len(lo), n_coeffs(dims, order)))
    for r, alpha in enumerate(lo):
        up = list(alpha)
        up[axis] += 1
        mat[r, pos[tuple(up)]] = alpha[axis] + 1
    return mat


@lru_cache(maxsize=None)
def _drop_constant(dims: int, order: int) -> np.ndarray:
    m = np.eye(n_coeffs(dims, order))
    m[0, 0] = 0.0
    return m


def _unit(c: int, batch_ndim: int) -> np.ndarray:
    e = np.zeros((c,) + (1,) * batch_ndim)
    e[0] = 1.0
    return e


def _check_order(order: int):
    if not 0 <= order <= MAX_ORDER:
        raise UnsupportedOrderError(f"jet order must be in 0..{MAX_ORDER}, got {order}")


# --------------------------------------------------------------------------
# univariate derivative tables, f^(k)(v) for k = 0..n-1


def _tanh_derivs(v, n):
    y = np.tanh(v)
    s = 1.0 - y * y
    table = [y, s, -2.0 * y * s, (6.0 * y * y - 2.0) * s, 8.0 * y * s * (2.0 - 3.0 * y * y)]
    return table[:n]


def _sin_derivs(v, n):
    s, c = np.sin(v), np.cos(v)
    return [s, c, -s, -c, s][:n]


def _cos_derivs(v, n):
    s, c = np.sin(v), np.cos(v)
    return [c, -s, -c, s, c][:n]


def _exp_derivs(v, n):
    e = np.exp(v)
    return [e] * n


def _reciprocal_derivs(v, n):
    r = 1.0 / v
    table = [r, -r**2, 2.0 * r**3, -6.0 * r**4, 24.0 * r**5]
    return table[:n]


def _identity_derivs(v, n):
    table = [v, np.ones_like(v), np.zeros_like(v), np.zeros_like(v), np.zeros_like(v)]
    return table[:n]


UNIVARIATE = {
    "tanh": _tanh_derivs,
    "sin": _sin_derivs,
    "cos": _cos_derivs,
    "exp": _exp_derivs,
    "reciprocal": _reciprocal_derivs,
    "identity": _identity_derivs,
}


def univariate_derivatives(v, name: str, count: int) -> Var:
    """Stack ``[f(v), f'(v), ..., f^(count-1)(v)]`` along a new leading axis."""
    v = as_var(v)
    table = UNIVARIATE[name](v.value, count + 1)
    out = np.stack(table[:count])
    upper = np.stack(table[1 : count + 1])

    def vjp(g):
        return ((g * upper).sum(axis=0),)

    return _record(out, (v,), vjp)


# --------------------------------------------------------------------------
# the jet type


class TaylorJet:
    """Truncated Taylor expansion of a (batched) scalar field.

    ``coeffs`` has shape ``(n_coeffs(dims, order), *batch)``.
    """

    __slots__ = ("coeffs", "order", "dims")

    def __init__(self, coeffs, order: int, dims: int = 2):
        _check_order(order)
        coeffs = as_var(coeffs)
        if coeffs.shape[0] != n_coeffs(dims, order):
            raise ShapeError(
                f"order {order} jet in {dims} dims needs {n_coeffs(dims, order)} "
                f"coefficients, got {coeffs.shape[0]}"
            )
        self.coeffs = coeffs
        self.order = order
        self.dims = dims

    def __repr__(self):
        return f"TaylorJet(order={self.order}, dims={self.dims}, batch={self.batch_shape})"

    @property
    def batch_shape(self):
        return self.coeffs.shape[1:]

    @property
    def value(self) -> Var:
        """The primal value (order-0 coefficient)."""
        return self.coeffs[0]

    def coefficient(self, alpha) -> Var:
        alpha = tuple(alpha) if len(alpha) else (0,) * self.dims
        return self.coeffs[_index_of(self.dims, self.order)[alpha]]

    def as_dict(self) -> dict:
        return {
            alpha: self.coeffs.value[k]
            for k, alpha in enumerate(multi_indices(self.dims, self.order))
        }

    def gradient(self) -> list:
        """First-order coefficients, i.e. the input gradient components."""
        if self.order < 1:
            raise UnsupportedOrderError("input gradient needs a jet of order >= 1")
        return [self.coeffs[1 + i] for i in range(self.dims)]

    def derivative(self, axis: int) -> "TaylorJet":
        """Jet (one order lower) of the partial derivative along ``axis``."""
        if self.order < 1:
            raise UnsupportedOrderError("cannot differentiate an order-0 jet")
        mat = _derivative_matrix(self.dims, self.order, axis)
        return TaylorJet(T.coeff_map(self.coeffs, mat), self.order - 1, self.dims)

    def truncate(self, order: int) -> "TaylorJet":
        if order > self.order:
            raise ShapeError(f"cannot raise jet order {self.order} to {order}")
        if order == self.order:
            return self
        return TaylorJet(self.coeffs[: n_coeffs(self.dims, order)], order, self.dims)

    def _coerce(self, other) -> "TaylorJet":
        if isinstance(other, TaylorJet):
            if other.order != self.order or other.dims != self.dims:
                raise ShapeError(
                    f"jet mismatch: order {self.order}/{other.order}, dims {self.dims}/{other.dims}"
                )
            return other
        return constant_jet(other, self.order, self.dims, self.batch_shape)

    def __add__(self, other):
        if not isinstance(other, TaylorJet):
            return self._shift(other)
        other = self._coerce(other)
        return TaylorJet(self.coeffs + other.coeffs, self.order, self.dims)

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, TaylorJet):
            return self._shift(-as_var(other) if isinstance(other, Var) else -np.asarray(other))
        other = self._coerce(other)
        return TaylorJet(self.coeffs - other.coeffs, self.order, self.dims)

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return TaylorJet(-self.coeffs, self.order, self.dims)

    def __mul__(self, other):
        if isinstance(other, TaylorJet):
            return jet_mul(self, other)
        return TaylorJet(self.coeffs * _broadcast_scalar(other), self.order, self.dims)

    __rmul__ = __mul__

    def _shift(self, c):
        """Add a quantity that is constant in the inputs."""
        e0 = _unit(self.coeffs.shape[0], len(self.batch_shape))
        c = c if isinstance(c, Var) else np.asarray(c, dtype=np.float64)
        return TaylorJet(self.coeffs + T.mul(e0, c), self.order, self.dims)

    def square(self) -> "TaylorJet":
        return jet_mul(self, self)

    def apply(self, name: str) -> "TaylorJet":
        return jet_apply(name, self)


def _broadcast_scalar(x):
    """Scalars/batch arrays multiply every coefficient identically."""
    if isinstance(x, Var):
        return x
    return np.asarray(x, dtype=np.float64)


def constant_jet(value, order: int, dims: int = 2, batch_shape=None) -> TaylorJet:
    _check_order(order)
    value = np.asarray(value, dtype=np.float64)
    if batch_shape is not None:
        value = np.broadcast_to(value, batch_shape)
    coeffs = np.zeros((n_coeffs(dims, order),) + value.shape)
    coeffs[0] = value
    return TaylorJet(coeffs, order, dims)


def jet_seed(value, coordinate_index, order: int, dims: int = 2, scale=1.0) -> TaylorJet:
    """Jet of the coordinate function ``x_i`` (or a constant if index is None).

    ``scale`` sets the first-order coefficient, used to seed normalised inputs
    ``(x - mean) / std`` with slope ``1 / std``.
    """
    _check_order(order)
    if coordinate_index is not None and not 0 <= coordinate_index < dims:
        raise ShapeError(f"coordinate index {coordinate_index} out of range for {dims} dims")
    jet = constant_jet(value, order, dims)
    if coordinate_index is not None and order >= 1:
        jet.coeffs.value[1 + coordinate_index] = scale
    return jet


def jet_mul(a: TaylorJet, b: TaylorJet) -> TaylorJet:
    """Truncated Cauchy product ``out[g] = sum_{alpha+beta=g} a[alpha] b[beta]``."""
    if a.order != b.order or a.dims != b.dims:
        raise ShapeError(f"jet mismatch: order {a.order}/{b.order}, dims {a.dims}/{b.dims}")
    sel_a, sel_b, gather = _product_tables(a.dims, a.order)
    av, bv = a.coeffs, b.coeffs
    if av.shape[1:] != bv.shape[1:]:
        shape = np.broadcast_shapes(av.shape, bv.shape)
        av = T.add(av, np.zeros(shape))
        bv = T.add(bv, np.zeros(shape))
    batch = av.shape[1:]
    fa = av.value.reshape(av.shape[0], -1)
    fb = bv.value.reshape(bv.shape[0], -1)
    pa = sel_a @ fa
    pb = sel_b @ fb
    out = (gather @ (pa * pb)).reshape((gather.shape[0],) + batch)

    def vjp(g):
        gp = gather.T @ g.reshape(g.shape[0], -1)
        ga = (sel_a.T @ (gp * pb)).reshape(av.shape) if av.tracked else None
        gb = (sel_b.T @ (gp * pa)).reshape(bv.shape) if bv.tracked else None
        return ga, gb

    return TaylorJet(_record(out, (av, bv), vjp), a.order, a.dims)


def jet_univariate(f_derivs, inner: TaylorJet) -> TaylorJet:
    """Compose a univariate function with a jet.

    ``f_derivs[k]`` is the k-th derivative of the outer function at the
    primal of ``inner``; it may be a scalar, a batch array or a ``Var`` row.
    Writing ``inner = v + h`` with ``h`` free of a constant term,
    ``f(v + h) = sum_k f^(k)(v) h^k / k!`` truncated at the jet order.
    """
    k_max = inner.order
    if len(f_derivs) < k_max + 1:
        raise ShapeError(f"need {k_max + 1} derivatives for an order-{k_max} jet")
    c = n_coeffs(inner.dims, inner.order)
    e0 = _unit(c, len(inner.batch_shape))
    out = T.mul(e0, f_derivs[0])
    if k_max == 0:
        return TaylorJet(out, 0, inner.dims)
    h = TaylorJet(T.coeff_map(inner.coeffs, _drop_constant(inner.dims, inner.order)), k_max, inner.dims)
    power = h
    for k in range(1, k_max + 1):
        if k > 1:
            power = jet_mul(power, h)
        out = out + T.mul(power.coeffs, f_derivs[k] * (1.0 / factorial(k)))
    return TaylorJet(out, k_max, inner.dims)


def jet_apply(name: str, inner: TaylorJet) -> TaylorJet:
    """Compose a registered elementwise function (tanh, sin, ...) with a jet."""
    derivs = univariate_derivatives(inner.value, name, inner.order + 1)
    rows = [derivs[k] for k in range(inner.order + 1)]
    return jet_univariate(rows, inner)


def jet_reciprocal(inner: TaylorJet) -> TaylorJet:
    return jet_apply("reciprocal", inner)
