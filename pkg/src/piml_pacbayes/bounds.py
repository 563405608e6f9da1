"""Closed-form PAC-Bayes bounds for multi-loss physics-informed risks.

Inputs per loss ``i`` are plain numbers: sample size ``m_i``, empirical risk,
constants ``(C_S, C_P, L)`` and Monte-Carlo gradient aggregates
``G_i = E_theta sum_j ||grad_x l_i(theta, x_ij)||^2`` (a *sum* over the split).
Every function returns a non-negative float or raises
:class:`VacuousBoundError`.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._rng import derive_seed
from .errors import ContractError, VacuousBoundError
from .model import Field, Normalizer, ParamVector
from .pde import loss_eval

EXP_LIMIT = 700.0


@dataclass(frozen=True)
class GaussianMeasure:
    mean: ParamVector
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ContractError("sigma^2 must be positive")

    def sample(self, seed: int, sign: float = 1.0) -> ParamVector:
        eps = np.random.default_rng(seed).standard_normal(len(self.mean))
        return self.mean.replace(self.mean.values + sign * math.sqrt(self.sigma2) * eps)


def _sq_dist(rho: GaussianMeasure, pi: GaussianMeasure) -> float:
    if rho.sigma2 != pi.sigma2:
        raise ContractError("only equal isotropic variances are supported")
    d = rho.mean.values - pi.mean.values
    return float(d @ d)


def kl_iso(rho: GaussianMeasure, pi: GaussianMeasure) -> float:
    return _sq_dist(rho, pi) / (2.0 * rho.sigma2)


def chi2_plus1_exponent(rho: GaussianMeasure, pi: GaussianMeasure) -> float:
    return _sq_dist(rho, pi) / rho.sigma2


def chi2_plus1_iso(rho: GaussianMeasure, pi: GaussianMeasure) -> float:
    """``chi^2(rho || pi) + 1 = exp(||mu_rho - mu_pi||^2 / sigma^2)``."""
    return dbar_from_exponent(chi2_plus1_exponent(rho, pi))


def dbar_from_exponent(z: float) -> float:
    if z > EXP_LIMIT:
        raise VacuousBoundError(f"bound vacuous: D-bar overflow (exponent {z:.4g})")
    return math.exp(z)


# --------------------------------------------------------------------------
# K terms


def _check_sizes(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if np.any(m <= 1):
        raise ContractError(f"every sample size must exceed 1, got {m.tolist()}")
    return m


def k_multi(kl: float, M: float, delta: float) -> float:
    """``M (KL + ln(2M/delta)) / (M - 1)``."""
    if M <= 1:
        raise ContractError("total sample size M must exceed 1")
    return M * (kl + math.log(2 * M / delta)) / (M - 1)


def k_delta(M: float, delta: float) -> float:
    """``M ln(2M/delta) / (M - 1)``."""
    return k_multi(0.0, M, delta)


def k_single(kl: float, m: float, delta: float) -> float:
    """``(KL + ln(2m/delta)) / (m - 1)``."""
    if m <= 1:
        raise ContractError("sample size must exceed 1")
    return (kl + math.log(2 * m / delta)) / (m - 1)


# --------------------------------------------------------------------------
# multi-task bounds (gaps)


def sobolev_gap(grad_sums, m, C_S, L, kl: float, delta: float) -> float:
    """Sample-weighted gap bound ``(1/M) sqrt(2 S K + L_S K^{3/2})``."""
    m = _check_sizes(m)
    C_S, L, G = (np.asarray(v, dtype=np.float64) for v in (C_S, L, grad_sums))
    M = float(m.sum())
    K = k_multi(kl, M, delta)
    S = float(np.sum(C_S * G))
    L_S = math.sqrt(2.0 * float(np.sum(m * C_S**2 * L**2)))
    return math.sqrt(2.0 * S * K + L_S * K**1.5) / M


def poincare_gap_eq(prior_grad_sums, m, C_P, L, dbar: float, delta: float) -> float:
    """Equal-weight gap bound on ``sum_i (R_i - r_i)``."""
    m = _check_sizes(m)
    C_P, L, G = (np.asarray(v, dtype=np.float64) for v in (C_P, L, prior_grad_sums))
    M = float(m.sum())
    S = float(np.sum(C_P / m**2 * G))
    L_P = math.sqrt(2.0 * float(np.sum(C_P**2 * L**2 / m**3)))
    return math.sqrt((2.0 * S + L_P * math.sqrt(k_delta(M, delta))) * dbar / delta)


def poincare_gap_sample(prior_grad_sums, m, C_P, L, dbar: float, delta: float) -> float:
    """Sample-weighted gap bound ``(1/M) sqrt((2 S + L^S K^{1/2}) D / delta)``."""
    m = _check_sizes(m)
    C_P, L, G = (np.asarray(v, dtype=np.float64) for v in (C_P, L, prior_grad_sums))
    M = float(m.sum())
    S = float(np.sum(C_P * G))
    L_S = math.sqrt(2.0 * float(np.sum(m * C_P**2 * L**2)))
    return math.sqrt((2.0 * S + L_S * math.sqrt(k_delta(M, delta))) * dbar / delta) / M


def weighted_risk(risks, m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sum(m * np.asarray(risks)) / m.sum())


# --------------------------------------------------------------------------
# per-loss union baselines


def union_sobolev(grad_means, m, C_S, L, kl: float, delta: float) -> np.ndarray:
    """``U_i`` at confidence ``delta / N_L``; ``grad_means`` are per-sample means."""
    m = _check_sizes(m)
    n = len(m)
    out = []
    for g, mi, cs, li in zip(grad_means, m, C_S, L):
        K = k_single(kl, mi, delta / n)
        out.append(math.sqrt(2.0 * cs * g * K + math.sqrt(2.0) * cs * li * K**1.5))
    return np.array(out)


def union_poincare(prior_grad_means, m, C_P, L, dbar: float, delta: float) -> np.ndarray:
    m = _check_sizes(m)
    n = len(m)
    out = []
    for g, mi, cp, li in zip(prior_grad_means, m, C_P, L):
        K = k_single(0.0, mi, delta / n)
        inner = 2.0 * cp / mi * g + math.sqrt(2.0) * cp * li / mi * math.sqrt(K)
        out.append(math.sqrt(n * dbar / delta * inner))
    return np.array(out)


# --------------------------------------------------------------------------
# LP tightening


@dataclass(frozen=True)
class LPResult:
    R: np.ndarray
    total: float
    binding: bool
    infeasible: bool = False


def lp_tighten(caps, weights, budget: float) -> LPResult:
    """Maximise ``sum R_i`` s.t. ``0 <= R_i <= c_i`` and ``sum w_i R_i <= b``.

    Fractional knapsack: every unit of budget buys ``1/w_i`` objective, so the
    cheapest variables (small ``w``) are kept at their caps and the most
    expensive ones are cut first.
    """
    c = np.asarray(caps, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if c.shape != w.shape or c.ndim != 1:
        raise ContractError("caps and weights must be 1-D and equally long")
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise ContractError("caps must be finite and non-negative")
    if np.any(w <= 0):
        raise ContractError("weights must be positive")
    if budget < 0:
        return LPResult(np.zeros_like(c), 0.0, True, infeasible=True)
    R = c.copy()
    excess = float(w @ R) - budget
    if excess <= 0:
        return LPResult(R, float(R.sum()), False)
    for i in np.argsort(-w, kind="stable"):
        cut = min(R[i], excess / w[i])
        R[i] -= cut
        excess -= cut * w[i]
        if excess <= 0:
            break
    return LPResult(R, float(R.sum()), True)


# --------------------------------------------------------------------------
# Monte-Carlo statistics


@dataclass
class MCStats:
    """Per-draw statistics of one loss on one split under one measure."""

    risk: np.ndarray  # mean loss per draw
    grad_sum: np.ndarray | None = None  # sum_j ||grad_x l||^2 per draw

    @property
    def mean_risk(self) -> float:
        return float(np.mean(self.risk))

    @property
    def stderr(self) -> float:
        """Standard error of :attr:`mean_risk`; antithetic pairs count as one observation."""
        r = self.risk
        if len(r) >= 4 and len(r) % 2 == 0:
            r = 0.5 * (r[0::2] + r[1::2])
        n = len(r)
        return float(np.std(r, ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    @property
    def mean_grad_sum(self) -> float:
        return float(np.mean(self.grad_sum))


def mc_draw(seed: int, k: int) -> tuple:
    """``(noise_seed, sign)`` of draw ``k``, shared by every measure in a report.

    Draws come in antithetic pairs ``+eps, -eps``; each draw is still exactly
    Gaussian, so the Monte-Carlo mean stays unbiased.
    """
    return derive_seed(seed, "mc", k // 2), (1.0 if k % 2 == 0 else -1.0)


def mc_statistics(measure: GaussianMeasure, benchmark, splits: dict, n_draws: int, seed: int,
                  normalizer: Normalizer | None = None, grad: bool = True, threads: int = 1) -> dict:
    """Per-loss :class:`MCStats` over ``n_draws`` parameter draws.

    With ``threads > 1`` draws are evaluated concurrently; results are
    collected in draw order, so the output does not depend on ``threads``.
    """
    if n_draws < 1:
        raise ContractError("need at least one Monte-Carlo draw")

    def one(k):
        theta = measure.sample(*mc_draw(seed, k))
        u = Field(theta, theta.spec, normalizer)
        out = {}
        for lid, rows in splits.items():
            v, g = loss_eval(u, benchmark, lid, rows, grad=grad)
            out[lid] = (float(np.mean(v)), float(np.sum(g)) if grad else None)
        return out

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_draw = list(pool.map(one, range(n_draws)))
    else:
        per_draw = [one(k) for k in range(n_draws)]
    return {lid: MCStats(np.array([d[lid][0] for d in per_draw]),
                         np.array([d[lid][1] for d in per_draw]) if grad else None)
            for lid in splits}


def mc_expected_risk(measure: GaussianMeasure, benchmark, splits: dict, n_draws: int = 100, seed: int = 0,
                     normalizer: Normalizer | None = None) -> dict:
    """``{loss_id: (mean, stderr)}`` of the empirical risk under the measure."""
    stats = mc_statistics(measure, benchmark, splits, n_draws, seed, normalizer, grad=False)
    return {lid: (s.mean_risk, s.stderr) for lid, s in stats.items()}


# --------------------------------------------------------------------------
# pooled physics


def pooled_physics_bound(risks: dict, grad_sums: dict, m: dict, constants: dict, kl: float,
                         delta: float, delta_prime: float, data_id: str = "d") -> dict:
    """Physics losses pooled at ``delta'``; data loss on its own at ``delta - delta'``.

    Physics splits are equally sized, so their sample-weighted bound rewrites
    as a bound on the summed physics risk.
    """
    if not 0 < delta_prime <= delta:
        raise ContractError("delta' must lie in (0, delta]")
    phys = [lid for lid in risks if lid != data_id]
    mp = np.array([m[l] for l in phys], dtype=np.float64)
    if not np.all(mp == mp[0]):
        raise ContractError("pooled physics bound expects equal physics sample sizes")
    gap = sobolev_gap([grad_sums[l] for l in phys], mp, [constants[l].C_S for l in phys],
                      [constants[l].L for l in phys], kl, delta_prime)
    physics = float(sum(risks[l] for l in phys) + len(phys) * gap)
    out = {"physics": physics, "data": 0.0}
    if data_id in risks and delta_prime < delta:
        c = constants[data_id]
        md = m[data_id]
        u = union_sobolev([grad_sums[data_id] / md], [md], [c.C_S], [c.L], kl, delta - delta_prime)[0]
        out["data"] = float(risks[data_id] + u)
    elif data_id in risks:
        raise ContractError("data loss present but no confidence left for it")
    out["total"] = out["physics"] + out["data"]
    return out


# --------------------------------------------------------------------------
# report


BOUND_COLUMNS = ("ours_sob", "ours_poi", "ours_poi_s", "u_sob", "u_poi", "pooled_physics")


@dataclass
class BoundReport:
    benchmark: str
    loss_ids: tuple
    m: dict
    delta: float
    sigma2: float
    loss_scale: float
    kl: float
    dbar_exponent: float
    train_risk: dict  # MC under rho on the posterior split (scaled)
    test_risk: dict  # MC under rho on the test split (scaled)
    train_risk_se: dict = field(default_factory=dict)
    test_risk_se: dict = field(default_factory=dict)
    grad_rho: dict = field(default_factory=dict)  # E_rho sum_j ||grad||^2
    grad_pi: dict = field(default_factory=dict)  # E_pi sum_j ||grad||^2
    terms: dict = field(default_factory=dict)  # gaps, K terms, union U_i, LP solutions
    bounds: dict = field(default_factory=dict)  # scaled total-risk bounds by family
    vacuous: dict = field(default_factory=dict)
    balanced: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> dict:
        """Bounds with the loss scale divided out (the reported numbers)."""
        return {k: v / self.loss_scale for k, v in self.bounds.items()}

    @property
    def test_total(self) -> float:
        return sum(self.test_risk.values()) / self.loss_scale

    @property
    def train_total(self) -> float:
        return sum(self.train_risk.values()) / self.loss_scale

    def headline(self, family: str = "sobolev") -> float:
        key = "ours_sob" if family == "sobolev" else "ours_poi"
        return self.final[key]

    def csv_row(self) -> dict:
        row = {"benchmark": self.benchmark, "config_hash": self.meta.get("config_hash", ""),
               "seed": self.meta.get("seed", ""), "m_d": self.m.get("d", ""),
               "delta": self.delta, "sigma2": self.sigma2, "kl": self.kl,
               "dbar_exponent": self.dbar_exponent, "train_total": self.train_total,
               "test_total": self.test_total}
        for col in BOUND_COLUMNS:
            row[col] = self.final.get(col, math.nan)
        for lid in self.loss_ids:
            row[f"train_{lid}"] = self.train_risk[lid] / self.loss_scale
            row[f"test_{lid}"] = self.test_risk[lid] / self.loss_scale
        return row

    def to_csv(self) -> str:
        row = self.csv_row()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([_fmt(v) for v in row.values()])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"benchmark {self.benchmark}  delta={self.delta}  sigma^2={self.sigma2:.6g}  "
                 f"scale={self.loss_scale:g}  balanced={self.balanced}",
                 f"KL={self.kl:.6g}  D-bar exponent={self.dbar_exponent:.6g}",
                 "loss       m      train        test   E_rho sum|g|^2   E_pi sum|g|^2"]
        for lid in self.loss_ids:
            lines.append(f"{lid:<6}{self.m[lid]:>6d}  {self.train_risk[lid] / self.loss_scale:>10.4g}  "
                         f"{self.test_risk[lid] / self.loss_scale:>10.4g}  {self.grad_rho.get(lid, math.nan):>15.6g}"
                         f"  {self.grad_pi.get(lid, math.nan):>14.6g}")
        lines.append(f"total test risk {self.test_total:.6g}   total train risk {self.train_total:.6g}")
        for name in BOUND_COLUMNS:
            v = self.final.get(name, math.nan)
            note = "  (vacuous: " + self.vacuous[name] + ")" if name in self.vacuous else ""
            lines.append(f"  {name:<15}{v:>14.6g}{note}")
        for key in sorted(self.terms):
            lines.append(f"  [{key}] {self.terms[key]}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "nan")
    return str(v)
