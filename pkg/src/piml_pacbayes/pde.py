"""Benchmark PDEs: domains, closed-form solutions and per-loss residuals.

Every loss is a squared residual ``l = r^2`` built from jets of ``u`` in the
raw input coordinates ``(x, t)``. To obtain ``grad_x l`` the residual is carried
one Taylor order higher than the operator needs and the first-order
coefficients of the squared jet are read off.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import pi

import numpy as np

from .autodiff import TaylorJet, jet_apply, jet_seed, ops
from .errors import ContractError

X_AXIS, T_AXIS = 0, 1

REGIONS = ("interior", "initial", "left", "right", "periodic")


@dataclass(frozen=True)
class LossSpec:
    id: str
    jet_order_eval: int
    region: str
    physics: bool = True

    @property
    def jet_order_grad(self) -> int:
        return self.jet_order_eval + 1


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    x_range: tuple
    t_range: tuple
    params: dict = field(default_factory=dict)
    losses: tuple = ()
    loss_scale: float = 1.0

    def __post_init__(self):
        if not self.loss_scale > 0:
            raise ContractError("loss_scale must be positive")

    @property
    def loss_ids(self) -> tuple:
        return tuple(l.id for l in self.losses)

    @property
    def physics_ids(self) -> tuple:
        return tuple(l.id for l in self.losses if l.physics)

    def loss(self, loss_id: str) -> LossSpec:
        for l in self.losses:
            if l.id == loss_id:
                return l
        raise ContractError(f"{self.name} has no loss {loss_id!r}; known: {self.loss_ids}")


def _data_loss():
    return LossSpec("d", 0, "interior", physics=False)


WAVE = BenchmarkSpec(
    "wave1d",
    (0.0, 1.0),
    (0.0, 1.0),
    {"beta": 4.0},
    (
        _data_loss(),
        LossSpec("p", 2, "interior"),
        LossSpec("ic", 0, "initial"),
        LossSpec("ig", 1, "initial"),
        LossSpec("b1", 0, "left"),
        LossSpec("b2", 0, "right"),
    ),
    1.0,
)

REACTION = BenchmarkSpec(
    "reaction1d",
    (0.0, 2 * pi),
    (0.0, 1.0),
    {"kappa": 5.0},
    (_data_loss(), LossSpec("p", 1, "interior"), LossSpec("ic", 0, "initial"), LossSpec("b", 0, "periodic")),
    100.0,
)

CONVECTION = BenchmarkSpec(
    "convection",
    (0.0, 2 * pi),
    (0.0, 1.0),
    {"beta": 50.0},
    (_data_loss(), LossSpec("p", 1, "interior"), LossSpec("ic", 0, "initial"), LossSpec("b", 0, "periodic")),
    10.0,
)

BENCHMARKS = {b.name: b for b in (WAVE, REACTION, CONVECTION)}


def get_benchmark(name) -> BenchmarkSpec:
    if isinstance(name, BenchmarkSpec):
        return name
    try:
        return BENCHMARKS[name]
    except KeyError:
        raise ContractError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}") from None


# --------------------------------------------------------------------------
# closed forms


def analytic_solution(benchmark, x, t):
    """Exact solution evaluated with numpy."""
    b = get_benchmark(benchmark)
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if b.name == "wave1d":
        beta = b.params["beta"]
        return np.sin(pi * x) * np.cos(2 * pi * t) + 0.5 * np.sin(beta * pi * x) * np.cos(2 * beta * pi * t)
    if b.name == "reaction1d":
        h = _gaussian_bump(x)
        e = h * np.exp(b.params["kappa"] * t)
        return e / (e + 1.0 - h)
    beta = b.params["beta"]
    return np.sin(x - beta * t)


def _gaussian_bump(x):
    return np.exp(-((x - pi) ** 2) / (2 * (pi / 4) ** 2))


def _bump_jet(x: TaylorJet) -> TaylorJet:
    d = x - pi
    return jet_apply("exp", d.square() * (-1.0 / (2 * (pi / 4) ** 2)))


def initial_condition_jet(b: BenchmarkSpec, x: TaylorJet) -> TaylorJet:
    """``u(x, 0)`` as a jet in ``x`` (constant in ``t``)."""
    if b.name == "wave1d":
        beta = b.params["beta"]
        return jet_apply("sin", x * pi) + jet_apply("sin", x * (beta * pi)) * 0.5
    if b.name == "reaction1d":
        return _bump_jet(x)
    return jet_apply("sin", x)


def analytic_field(benchmark):
    """The closed-form solution as a jet-valued ``u(x, t)``."""
    b = get_benchmark(benchmark)

    def u(x: TaylorJet, t: TaylorJet) -> TaylorJet:
        if b.name == "wave1d":
            beta = b.params["beta"]
            first = jet_apply("sin", x * pi) * jet_apply("cos", t * (2 * pi))
            second = jet_apply("sin", x * (beta * pi)) * jet_apply("cos", t * (2 * beta * pi))
            return first + second * 0.5
        if b.name == "reaction1d":
            h = _bump_jet(x)
            grow = h * jet_apply("exp", t * b.params["kappa"])
            return grow * jet_apply("reciprocal", grow + 1.0 - h)
        return jet_apply("sin", x - t * b.params["beta"])

    return u


# --------------------------------------------------------------------------
# residuals


def residual_jet(b: BenchmarkSpec, loss_id: str, u, x: TaylorJet, t: TaylorJet, y=None) -> TaylorJet:
    """Residual ``r`` with ``l = r^2``; its jet order is ``x.order - jet_order_eval``."""
    spec = b.loss(loss_id)
    q = x.order - spec.jet_order_eval
    if q < 0:
        raise ContractError(f"loss {loss_id} needs input jets of order >= {spec.jet_order_eval}")
    if loss_id == "d":
        if y is None:
            raise ContractError("data loss needs targets")
        return u(x, t) - np.asarray(y, dtype=np.float64)
    if loss_id == "p":
        uu = u(x, t)
        if b.name == "wave1d":
            u_tt = uu.derivative(T_AXIS).derivative(T_AXIS)
            u_xx = uu.derivative(X_AXIS).derivative(X_AXIS)
            return u_tt - u_xx * 4.0
        u_t = uu.derivative(T_AXIS)
        if b.name == "reaction1d":
            base = uu.truncate(q)
            return u_t - (base - base.square()) * b.params["kappa"]
        return u_t + uu.derivative(X_AXIS) * b.params["beta"]
    if loss_id == "ic":
        return u(x, t) - initial_condition_jet(b, x)
    if loss_id == "ig":
        return u(x, t).derivative(T_AXIS)
    if loss_id in ("b1", "b2"):
        return u(x, t)
    if loss_id == "b":
        width = b.x_range[1] - b.x_range[0]
        return u(x, t) - u(x + width, t)
    raise ContractError(f"unknown loss id {loss_id!r}")


def loss_jet(b, loss_id, u, samples, grad: bool) -> TaylorJet:
    """Jet of the unscaled loss at every sample: order 1 if ``grad`` else 0."""
    b = get_benchmark(b)
    spec = b.loss(loss_id)
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    order = spec.jet_order_grad if grad else spec.jet_order_eval
    x = jet_seed(samples[:, 0], X_AXIS, order)
    t = jet_seed(samples[:, 1], T_AXIS, order)
    y = samples[:, 2] if loss_id == "d" else None
    return residual_jet(b, loss_id, u, x, t, y).square()


def loss_terms(b, loss_id, u, samples, grad: bool = True):
    """Scaled per-sample ``(values, grad_norm_sq)`` as ``Var`` objects.

    ``grad_norm_sq`` is ``None`` when ``grad`` is false.
    """
    b = get_benchmark(b)
    jet = loss_jet(b, loss_id, u, samples, grad)
    c = b.loss_scale
    values = jet.value * c if c != 1.0 else jet.value
    if not grad:
        return values, None
    gx, gt = jet.gradient()
    gn = ops.square(gx) + ops.square(gt)
    return values, (gn * (c * c) if c != 1.0 else gn)


def loss_eval(u, benchmark, loss_id, samples, grad: bool = True, chunk: int = 2048):
    """Numpy per-sample scaled loss values and squared input-gradient norms."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    vals, grads = [], []
    for start in range(0, len(samples), chunk):
        v, g = loss_terms(benchmark, loss_id, u, samples[start : start + chunk], grad)
        vals.append(v.value)
        if grad:
            grads.append(g.value)
    values = np.concatenate(vals) if vals else np.zeros(0)
    return values, (np.concatenate(grads) if grad else None)


def empirical_risk(u, benchmark, loss_id, samples) -> float:
    """Mean scaled loss over a split."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.size == 0 or len(samples) == 0:
        raise ContractError("empirical risk of an empty split")
    values, _ = loss_eval(u, benchmark, loss_id, samples, grad=False)
    return float(np.mean(values))
