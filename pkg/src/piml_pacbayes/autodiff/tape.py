"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every operation applied to a watched value while it is
active. Values are :class:`Var` objects wrapping an ``ndarray``; operations on
untracked inputs are evaluated eagerly and not recorded, so forward-only
evaluation (constant estimation, Monte-Carlo bound evaluation) pays no
bookkeeping cost.

The primitives are deliberately few: elementwise arithmetic, reductions,
indexing, a coefficient-axis linear map and a dense layer. Taylor-jet
arithmetic in :mod:`piml_pacbayes.autodiff.jets` is built on top of them, which
is what makes parameter gradients of jet coefficients exact.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, ShapeError

_ACTIVE: list["Tape"] = []


class Var:
    """An array value, optionally recorded on the active tape."""

    __slots__ = ("value", "parents", "vjp", "index", "tape")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.index = -1
        self.tape = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def __repr__(self):
        flag = "tracked" if self.tracked else "const"
        return f"Var({flag}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _record(value, parents, vjp) -> Var:
    """Create the output of an op, recording it only if a parent is tracked."""
    out = Var(value)
    tape = None
    for p in parents:
        if p.tape is not None:
            tape = p.tape
            break
    if tape is not None:
        out.parents = parents
        out.vjp = vjp
        tape._append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Append-only record of operations, swept in reverse for gradients.

    Use as a context manager; :meth:`watch` marks arrays as differentiation
    leaves. Nodes are appended in creation order, so the list is already
    topologically sorted.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def _append(self, var: Var):
        var.index = len(self.nodes)
        var.tape = self
        self.nodes.append(var)

    def watch(self, value) -> Var:
        """Register ``value`` as a leaf and return its tracked ``Var``."""
        leaf = Var(np.array(value, dtype=np.float64))
        self._append(leaf)
        return leaf

    def gradient(self, output, wrt, *, seed=None, per_sample=False):
        """Reverse sweep from ``output`` to the leaves ``wrt``.

        ``output`` must be a single number unless ``seed`` (the output adjoint)
        is given. With ``per_sample=True`` the dense-layer ops return one
        parameter gradient per row of their batch axis instead of the sum; this
        is only meaningful when the leaves feed :func:`linear` directly.
        """
        if isinstance(output, (list, tuple)):
            raise ContractError("gradient output must be a single Var")
        if output.tape is not self:
            return [np.zeros_like(w.value) for w in wrt]
        if seed is None:
            if output.value.size != 1:
                raise ContractError(
                    f"reverse sweep needs a scalar output, got shape {output.value.shape}"
                )
            seed = np.ones_like(output.value)
        grads: list = [None] * len(self.nodes)
        grads[output.index] = np.asarray(seed, dtype=np.float64)
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads[node.index]
            if g is None or node.vjp is None:
                continue
            if getattr(node.vjp, "per_sample_aware", False):
                parent_grads = node.vjp(g, per_sample)
            else:
                parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or parent.tape is not self:
                    continue
                acc = grads[parent.index]
                grads[parent.index] = pg if acc is None else acc + pg
        out = []
        for w in wrt:
            g = grads[w.index] if w.tape is self else None
            out.append(np.zeros_like(w.value) if g is None else g)
        return out


def active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.value + b.value, (a, b), vjp)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(a.value - b.value, (a, b), vjp)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value

    def vjp(g):
        ga = _unbroadcast(g * bv, av.shape) if a.tracked else None
        gb = _unbroadcast(g * av, bv.shape) if b.tracked else None
        return ga, gb

    return _record(av * bv, (a, b), vjp)


def reciprocal(a) -> Var:
    a = as_var(a)
    out = 1.0 / a.value

    def vjp(g):
        return (-g * out * out,)

    return _record(out, (a,), vjp)


def square(a) -> Var:
    a = as_var(a)
    av = a.value

    def vjp(g):
        return (2.0 * g * av,)

    return _record(av * av, (a,), vjp)


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.value)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _record(out, (a,), vjp)


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)

    def vjp(g):
        return (g * out,)

    return _record(out, (a,), vjp)


def power(a, p: float) -> Var:
    a = as_var(a)
    av = a.value
    out = av**p

    def vjp(g):
        return (g * p * av ** (p - 1.0),)

    return _record(out, (a,), vjp)


# --------------------------------------------------------------------------
# reductions and shape ops


def sum(a, axis=None) -> Var:  # noqa: A001 - mirrors numpy naming
    a = as_var(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(a.value.sum(axis=axis), (a,), vjp)


def mean(a, axis=None) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def getitem(a, idx) -> Var:
    a = as_var(a)
    shape = a.shape

    fancy = _is_fancy(idx)

    def vjp(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _record(a.value[idx], (a,), vjp)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _record(a.value.reshape(shape), (a,), vjp)


def stack(vars_, axis=0) -> Var:
    vs = [as_var(v) for v in vars_]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vs)))

    return _record(np.stack([v.value for v in vs], axis=axis), tuple(vs), vjp)


# --------------------------------------------------------------------------
# structured linear maps


def coeff_map(a, matrix: np.ndarray) -> Var:
    """Apply a fixed matrix along the leading (coefficient) axis."""
    a = as_var(a)
    av = a.value
    flat = av.reshape(av.shape[0], -1)
    out = (matrix @ flat).reshape((matrix.shape[0],) + av.shape[1:])

    def vjp(g):
        gf = g.reshape(g.shape[0], -1)
        return ((matrix.T @ gf).reshape(av.shape),)

    return _record(out, (a,), vjp)


def linear(x, weight, bias) -> Var:
    """Dense layer applied to a stack of jet coefficients.

    ``x`` has shape ``(C, N, fan_in)``; the bias enters coefficient 0 only
    because it is constant in the inputs.
    """
    x, weight, bias = as_var(x), as_var(weight), as_var(bias)
    xv, wv = x.value, weight.value
    out = xv @ wv
    out[0] += bias.value

    def vjp(g, per_sample=False):
        gx = g @ wv.T if x.tracked else None
        gw = gb = None
        if weight.tracked:
            if per_sample:
                gw = np.einsum("cni,cno->nio", xv, g, optimize=True)
            else:
                c, n, i = xv.shape
                gw = xv.reshape(c * n, i).T @ g.reshape(c * n, -1)
        if bias.tracked:
            gb = g[0] if per_sample else g[0].sum(axis=0)
        return gx, gw, gb

    vjp.per_sample_aware = True
    return _record(out, (x, weight, bias), vjp)


def check_same_shape(a: Var, b: Var):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
