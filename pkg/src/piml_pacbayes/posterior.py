"""Posterior training on surrogate bounds and final bound assembly."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._rng import derive_seed, rng_for
from .autodiff import Tape, ops
from .bounds import (
    BoundReport,
    GaussianMeasure,
    chi2_plus1_exponent,
    dbar_from_exponent,
    k_delta,
    k_multi,
    kl_iso,
    lp_tighten,
    mc_statistics,
    poincare_gap_eq,
    poincare_gap_sample,
    pooled_physics_bound,
    sobolev_gap,
    union_poincare,
    union_sobolev,
)
from .errors import ContractError, NumericFailure, VacuousBoundError
from .model import Field, Normalizer, ParamVector, watch_layers
from .pde import get_benchmark, loss_terms
from .train import BatchSampler, OptimState, adam_step, flat_gradient

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SurrogateChoice:
    family: str = "sobolev"
    mode: str = "self_bounding"

    def __post_init__(self):
        if self.family not in ("sobolev", "poincare"):
            raise ContractError(f"unknown surrogate family {self.family!r}")
        if self.mode not in ("self_bounding", "bounding_aware"):
            raise ContractError(f"unknown surrogate mode {self.mode!r}")


@dataclass
class SurrogateInputs:
    """Everything the surrogate needs besides the parameters."""

    benchmark: object
    constants: dict
    m: dict  # full posterior split sizes
    delta: float
    sigma2: float
    prior_grad_sums: dict | None = None  # E_pi sum_j ||grad||^2, Poincare only


def surrogate_terms(field_prime, r2, batches: dict, inp: SurrogateInputs, choice: SurrogateChoice):
    """Surrogate as a ``Var``; ``r2`` is ``||theta_rho - theta_pi||^2`` (a ``Var`` or float)."""
    b = get_benchmark(inp.benchmark)
    ids = list(batches)
    n = len(ids)
    need_grad = choice.family == "sobolev"
    risk = 0.0
    grad_sum = {}
    for lid in ids:
        vals, gn = loss_terms(b, lid, field_prime, batches[lid], grad=need_grad)
        risk = ops.mean(vals) + risk
        if need_grad:
            # unbiased estimate of the full-split sum
            grad_sum[lid] = ops.sum(gn) * (inp.m[lid] / len(batches[lid]))
    c = inp.constants
    kl = r2 * (1.0 / (2.0 * inp.sigma2))
    if choice.mode == "self_bounding":
        sizes = {inp.m[l] for l in ids}
        if len(sizes) != 1:
            raise ContractError("self-bounding surrogates need equal sample sizes")
        m = float(sizes.pop())
        M = n * m
        if choice.family == "sobolev":
            K = (kl + math.log(2 * M / inp.delta)) * (M / (M - 1))
            S = None
            for lid in ids:
                t = grad_sum[lid] * (c[lid].C_S / m**2)
                S = t if S is None else S + t
            L_S = math.sqrt(2.0 * sum(m * c[l].C_S**2 * c[l].L**2 for l in ids))
            inner = S * 2.0 * K + ops.power(K, 1.5) * (L_S / m**2)
            return risk + ops.sqrt(inner)
        S = sum(c[l].C_P / m**2 * inp.prior_grad_sums[l] for l in ids)
        L_P = math.sqrt(2.0 * sum(c[l].C_P**2 * c[l].L**2 / m**3 for l in ids))
        const = (2.0 * S + L_P * math.sqrt(k_delta(M, inp.delta))) / inp.delta
        return risk + ops.sqrt(ops.exp(r2 * (1.0 / inp.sigma2)) * const)
    total = risk
    for lid in ids:
        mi = float(inp.m[lid])
        ci = c[lid]
        if choice.family == "sobolev":
            K = (kl + math.log(2 * n * mi / inp.delta)) * (1.0 / (mi - 1))
            inner = grad_sum[lid] * K * (2.0 * ci.C_S / mi) + ops.power(K, 1.5) * (math.sqrt(2.0) * ci.L * ci.C_S)
            total = total + ops.sqrt(inner)
        else:
            K = math.log(2 * n * mi / inp.delta) / (mi - 1)
            const = n / inp.delta * (2.0 * ci.C_P / mi**2 * inp.prior_grad_sums[lid]
                                     + math.sqrt(2.0) * ci.L * ci.C_P / mi * math.sqrt(K))
            total = total + ops.sqrt(ops.exp(r2 * (1.0 / inp.sigma2)) * const)
    return total


def _r2_check(r2: float, sigma2: float, family: str):
    if family == "poincare" and r2 / sigma2 > 700:
        raise NumericFailure("posterior escaped prior neighborhood (r^2/sigma^2 > 700)")


def surrogate_value(theta_prime: ParamVector, theta_rho: ParamVector, theta_pi: ParamVector, batches: dict,
                    inp: SurrogateInputs, choice: SurrogateChoice, normalizer: Normalizer | None = None) -> float:
    """Numeric surrogate at ``theta'`` with the divergence taken at ``theta_rho``."""
    r2 = float(np.sum((theta_rho.values - theta_pi.values) ** 2))
    _r2_check(r2, inp.sigma2, choice.family)
    out = surrogate_terms(Field(theta_prime, theta_prime.spec, normalizer), r2, batches, inp, choice)
    return float(out.value) if hasattr(out, "value") else float(out)


def surrogate_value_and_grad(theta_rho: ParamVector, eps: np.ndarray, theta_pi: ParamVector, batches: dict,
                             inp: SurrogateInputs, choice: SurrogateChoice, normalizer=None):
    """Surrogate at ``theta' = theta_rho + eps`` and its gradient in ``theta_rho``."""
    spec = theta_rho.spec
    diff = theta_rho.values - theta_pi.values
    _r2_check(float(diff @ diff), inp.sigma2, choice.family)
    eps_layers = theta_rho.replace(eps).layers()
    pi_layers = theta_pi.layers()
    with Tape() as tape:
        layers = watch_layers(tape, theta_rho)
        prime = [(ops.add(w, ew), ops.add(bb, eb)) for (w, bb), (ew, eb) in zip(layers, eps_layers)]
        r2 = None
        for (w, bb), (pw, pb) in zip(layers, pi_layers):
            t = ops.sum(ops.square(ops.sub(w, pw))) + ops.sum(ops.square(ops.sub(bb, pb)))
            r2 = t if r2 is None else r2 + t
        out = surrogate_terms(Field(prime, spec, normalizer), r2, batches, inp, choice)
        grads = tape.gradient(out, [v for pair in layers for v in pair])
    return float(out.value), flat_gradient(grads)


# --------------------------------------------------------------------------
# stage 2


def posterior_noise(seed: int, it: int, n: int, sigma: float) -> np.ndarray:
    """Noise of iteration ``it``: one Gaussian draw, sign-flipped on odd iterations.

    Consecutive iterations form antithetic pairs so that the curvature term
    ``H eps`` of the perturbed gradient cancels inside Adam's first moment.
    """
    eps = np.random.default_rng(derive_seed(seed, "post-noise", it // 2)).standard_normal(n)
    return sigma * eps if it % 2 == 0 else -sigma * eps


@dataclass
class PosteriorResult:
    theta: ParamVector
    history: list = field(default_factory=list)


def train_posterior(theta_pi: ParamVector, constants: dict, splits: dict, choice: SurrogateChoice, config,
                    seed: int | None = None, normalizer: Normalizer | None = None,
                    prior_grad_sums: dict | None = None) -> PosteriorResult:
    """Adam on the surrogate with one fresh noise draw per iteration."""
    seed = config.seed if seed is None else seed
    b = get_benchmark(config.benchmark)
    if choice.family == "poincare" and prior_grad_sums is None:
        raise ContractError("Poincare surrogates need precomputed prior gradient sums")
    inp = SurrogateInputs(b, constants, {l: len(r) for l, r in splits.items()}, config.delta,
                          config.sigma_sq, prior_grad_sums)
    samplers = {lid: BatchSampler(rows, config.batch_size, rng_for(seed, "post-batches", lid))
                for lid, rows in splits.items()}
    state = OptimState.zeros(len(theta_pi), lr=config.lr_post, decay=config.lr_decay,
                             decay_every=config.decay_every)
    theta = theta_pi
    result = PosteriorResult(theta)
    sigma = math.sqrt(config.sigma_sq)
    for it in range(config.n_iter_post):
        batches = {lid: s.next() for lid, s in samplers.items()}
        eps = posterior_noise(seed, it, len(theta), sigma)
        value, grad = surrogate_value_and_grad(theta, eps, theta_pi, batches, inp, choice, normalizer)
        if not math.isfinite(value):
            log.error("non-finite surrogate at iteration %d; keeping last parameters", it)
            raise NumericFailure("non-finite surrogate", iteration=it)
        result.history.append({"iteration": it, "surrogate": value, "lr": state.current_lr(),
                               "r2": float(np.sum((theta.values - theta_pi.values) ** 2))})
        theta = theta.replace(adam_step(theta.values, grad, state))
        result.theta = theta
    return result


# --------------------------------------------------------------------------
# final report


def finalize_report(theta_rho: ParamVector, theta_pi: ParamVector, constants: dict, post_splits: dict,
                    test_splits: dict, config, normalizer: Normalizer | None = None,
                    prior_stats: dict | None = None, meta: dict | None = None,
                    threads: int = 1) -> BoundReport:
    """Evaluate every bound family at ``rho = N(theta_rho, sigma^2 I)``."""
    b = get_benchmark(config.benchmark)
    ids = [l for l in b.loss_ids if l in post_splits]
    sigma2 = config.sigma_sq
    rho, pi = GaussianMeasure(theta_rho, sigma2), GaussianMeasure(theta_pi, sigma2)
    n_mc, seed = config.mc_draws, config.seed
    if prior_stats is None:
        prior_stats = mc_statistics(pi, b, post_splits, n_mc, seed, normalizer, threads=threads)
    rho_stats = mc_statistics(rho, b, post_splits, n_mc, seed, normalizer, threads=threads)
    test_stats = mc_statistics(rho, b, test_splits, n_mc, seed, normalizer, grad=False, threads=threads)

    m = np.array([len(post_splits[l]) for l in ids], dtype=np.float64)
    w = m / m.sum()
    r_hat = np.array([rho_stats[l].mean_risk for l in ids])
    G_rho = np.array([rho_stats[l].mean_grad_sum for l in ids])
    G_pi = np.array([prior_stats[l].mean_grad_sum for l in ids])
    C_S = np.array([constants[l].C_S for l in ids])
    C_P = np.array([constants[l].C_P for l in ids])
    L = np.array([constants[l].L for l in ids])
    kl = kl_iso(rho, pi)
    z = chi2_plus1_exponent(rho, pi)
    balanced = bool(np.all(m == m[0]))
    delta = config.delta
    n = len(ids)

    report = BoundReport(b.name, tuple(ids), {l: int(len(post_splits[l])) for l in ids}, delta, sigma2,
                         b.loss_scale, kl, z,
                         {l: rho_stats[l].mean_risk for l in ids}, {l: test_stats[l].mean_risk for l in ids},
                         {l: rho_stats[l].stderr for l in ids}, {l: test_stats[l].stderr for l in ids},
                         {l: rho_stats[l].mean_grad_sum for l in ids}, {l: prior_stats[l].mean_grad_sum for l in ids},
                         balanced=balanced, meta=dict(meta or {}))
    terms, bounds = report.terms, report.bounds
    terms["K_multi"] = k_multi(kl, float(m.sum()), delta)
    terms["K_delta"] = k_delta(float(m.sum()), delta)

    # Sobolev family
    gap_s = sobolev_gap(G_rho, m, C_S, L, kl, delta)
    u_sob = union_sobolev(G_rho / m, m, C_S, L, kl, delta)
    terms["gap_sob_S"] = gap_s
    terms["U_sob"] = u_sob.tolist()
    bounds["u_sob"] = float(np.sum(r_hat + u_sob))
    if balanced:
        bounds["ours_sob"] = float(r_hat.sum() + n * gap_s)
    else:
        lp = lp_tighten(r_hat + u_sob, w, float(w @ r_hat) + gap_s)
        terms["lp_sob"] = lp.R.tolist()
        bounds["ours_sob"] = lp.total

    # Poincare family
    try:
        dbar = dbar_from_exponent(z)
    except VacuousBoundError as exc:
        for key in ("ours_poi", "ours_poi_s", "u_poi"):
            bounds[key] = math.inf
            report.vacuous[key] = str(exc)
    else:
        gap_eq = poincare_gap_eq(G_pi, m, C_P, L, dbar, delta)
        gap_ps = poincare_gap_sample(G_pi, m, C_P, L, dbar, delta)
        u_poi = union_poincare(G_pi / m, m, C_P, L, dbar, delta)
        terms.update(gap_poi=gap_eq, gap_poi_S=gap_ps, U_poi=u_poi.tolist())
        bounds["ours_poi"] = float(r_hat.sum() + gap_eq)
        bounds["u_poi"] = float(np.sum(r_hat + u_poi))
        if balanced:
            bounds["ours_poi_s"] = float(r_hat.sum() + n * gap_ps)
        else:
            lp = lp_tighten(r_hat + u_poi, w, float(w @ r_hat) + gap_ps)
            terms["lp_poi_S"] = lp.R.tolist()
            bounds["ours_poi_s"] = lp.total

    if config.pooled_physics and "d" in ids and n > 1:
        pooled = pooled_physics_bound(dict(zip(ids, r_hat)), dict(zip(ids, G_rho)),
                                      dict(zip(ids, m)), constants, kl, delta, config.pooled_delta)
        terms["pooled"] = pooled
        bounds["pooled_physics"] = pooled["total"]
    for k, v in bounds.items():
        if not (v >= 0):
            raise NumericFailure(f"bound {k} is {v}")
    return report
