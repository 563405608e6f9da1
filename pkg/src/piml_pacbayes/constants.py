"""Sobolev, Poincare and Lipschitz constants from random models around the prior.

All statistics are taken on the calibration split with losses clipped at
``loss_clip`` and squared input-gradient norms clipped at the threshold.
Values are in the scaled-loss units used throughout the pipeline.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._rng import derive_seed
from .errors import EstimationFailure, ParseError
from .model import Field, Normalizer, ParamVector, sample_at_distance
from .pde import loss_eval

log = logging.getLogger(__name__)

FLOOR = 1e-12


def clip(v, c):
    """``min(v, c)``, elementwise."""
    if not c > 0:
        raise ValueError("clip threshold must be positive")
    return np.minimum(v, c)


@dataclass(frozen=True)
class DrawStats:
    """Per-sample clipped losses and unclipped squared gradient norms of one model."""

    losses: np.ndarray
    grad_sq: np.ndarray
    radius: float
    seed: int


def draw_stats(theta_pi: ParamVector, benchmark, loss_id: str, calib, radius: float, seed: int,
               normalizer: Normalizer | None = None, loss_clip: float = 100.0) -> DrawStats:
    theta = sample_at_distance(theta_pi, radius, seed)
    values, grads = loss_eval(Field(theta, theta.spec, normalizer), benchmark, loss_id, calib)
    return DrawStats(clip(values, loss_clip), grads, radius, seed)


def draws(theta_pi, benchmark, loss_id, calib, radius, n_draw, seed, tag, normalizer=None, loss_clip=100.0):
    """``n_draw`` models at ``radius``; seeds derive from ``(seed, loss, tag, radius, k)``."""
    return [
        draw_stats(theta_pi, benchmark, loss_id, calib, radius,
                   derive_seed(seed, "constants", loss_id, tag, int(round(radius * 1e6)), k),
                   normalizer, loss_clip)
        for k in range(n_draw)
    ]


# --------------------------------------------------------------------------
# ratios


def variance_ratio(losses: np.ndarray, grad_sq: np.ndarray, tau: float) -> float:
    """Population variance of the losses over the mean clipped squared gradient norm."""
    var = float(np.var(losses))
    denom = float(np.mean(clip(grad_sq, tau)))
    if denom <= 0:
        return math.inf
    return var / denom


def log_cgf(losses: np.ndarray, lam: float) -> float:
    """``ln mean exp(lam (mean l - l))`` with a max shift."""
    a = lam * (np.mean(losses) - losses)
    top = float(np.max(a))
    return top + float(np.log(np.mean(np.exp(a - top))))


def cgf_ratio(losses: np.ndarray, grad_sq: np.ndarray, tau: float, lam: float) -> float:
    """``2 Lambda(lam) / (lam^2 mean clip(g, tau))``."""
    denom = float(np.mean(clip(grad_sq, tau)))
    if denom <= 0:
        return math.inf
    return 2.0 * log_cgf(losses, lam) / (lam * lam * denom)


def cp_ratio(stats: list, tau: float) -> float:
    """Largest variance ratio across the given model draws."""
    if not stats:
        raise ValueError("cp_ratio needs at least one draw")
    return max(variance_ratio(s.losses, s.grad_sq, tau) for s in stats)


# --------------------------------------------------------------------------
# search


@dataclass(frozen=True)
class TaskConstants:
    loss_id: str
    L: float
    C_P: float
    C_S: float
    loss_clip: float
    seed: int = 0
    radii: tuple = ()
    tau_grid: tuple = ()
    lambda_grid: tuple = ()
    pass1_scores: tuple = ()
    candidates: tuple = ()
    pass2_scores: tuple = ()
    cgf_curve: tuple = ()  # max CGF ratio over refine draws, per lambda
    variance_ratio_max: float | None = None
    borrowed_from: str | None = None

    def __post_init__(self):
        for name in ("L", "C_P", "C_S"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        for name in ("radii", "tau_grid", "lambda_grid", "pass1_scores", "candidates", "pass2_scores",
                     "cgf_curve"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))

    def borrowed(self, loss_id: str) -> "TaskConstants":
        """Same constants relabelled for another loss."""
        d = asdict(self)
        d.update(loss_id=loss_id, borrowed_from=self.loss_id)
        return TaskConstants(**d)


def search_L(theta_pi, benchmark, loss_id, tau_grid, k, n_draw, calib, seed,
             normalizer=None, loss_clip=100.0):
    """Two-pass clipping-threshold search at radius 1.

    Returns ``(L, pass1_scores, candidate_indices, pass2_scores)``.
    """
    tau_grid = np.asarray(tau_grid, dtype=np.float64)
    if tau_grid.size == 0:
        raise EstimationFailure("empty tau grid")
    first = draws(theta_pi, benchmark, loss_id, calib, 1.0, n_draw, seed, "pass1", normalizer, loss_clip)
    s1 = np.array([cp_ratio(first, t) for t in tau_grid])
    finite = np.flatnonzero(np.isfinite(s1))
    if finite.size == 0:
        raise EstimationFailure(f"all clipped ratios are infinite for loss {loss_id}")
    # stable sort keeps grid order among ties, i.e. smaller tau first
    cand = finite[np.argsort(s1[finite], kind="stable")[:k]]
    second = draws(theta_pi, benchmark, loss_id, calib, 1.0, n_draw, seed, "pass2", normalizer, loss_clip)
    s2 = np.array([cp_ratio(second, tau_grid[i]) for i in cand])
    ok = np.flatnonzero(np.isfinite(s2))
    if ok.size == 0:
        raise EstimationFailure(f"refined ratios are all infinite for loss {loss_id}")
    best = min(ok, key=lambda j: (s2[j], tau_grid[cand[j]]))
    return float(tau_grid[cand[best]]), s1, cand, s2


def estimate_cp_cs(stats: list, L: float, lambda_grid) -> tuple:
    """``(C_P, C_S)`` as maxima over draws (and the lambda grid for ``C_S``)."""
    cp = max(variance_ratio(s.losses, s.grad_sq, L) for s in stats)
    cs = -math.inf
    for s in stats:
        for lam in lambda_grid:
            r = cgf_ratio(s.losses, s.grad_sq, L, lam)
            if not np.isfinite(r) and r != math.inf:
                log.warning("dropping lambda=%g: non-finite cumulant", lam)
                continue
            cs = max(cs, r)
    out = []
    for name, v in (("C_P", cp), ("C_S", cs)):
        if not math.isfinite(v):
            raise EstimationFailure(f"{name} is not finite")
        if v < FLOOR:
            log.warning("%s = %g floored to %g", name, v, FLOOR)
            v = FLOOR
        out.append(float(v))
    return tuple(out)


def cgf_curve(stats: list, L: float, lambda_grid) -> list:
    """Largest CGF ratio across draws at each lambda."""
    return [max(cgf_ratio(s.losses, s.grad_sq, L, lam) for s in stats) for lam in lambda_grid]


def refine_draws(theta_pi, benchmark, loss_id, radii, n_draw, calib, seed, normalizer=None, loss_clip=100.0):
    return [s for r in radii
            for s in draws(theta_pi, benchmark, loss_id, calib, r, n_draw, seed, "refine", normalizer, loss_clip)]


def estimate_CP_CS(theta_pi, benchmark, loss_id, L, radii, n_draw, lambda_grid, calib, seed,
                   normalizer=None, loss_clip=100.0):
    """Fresh draws at every radius, then :func:`estimate_cp_cs`."""
    stats = refine_draws(theta_pi, benchmark, loss_id, radii, n_draw, calib, seed, normalizer, loss_clip)
    return estimate_cp_cs(stats, L, lambda_grid)


def estimate_constants(theta_pi, benchmark, loss_id, calib, config, normalizer=None) -> TaskConstants:
    """Full per-loss procedure driven by a :class:`RunConfig`."""
    if len(calib) == 0:
        raise EstimationFailure(f"empty calibration split for loss {loss_id}")
    seed = config.seed
    L, s1, cand, s2 = search_L(theta_pi, benchmark, loss_id, config.tau_grid, config.k_smallest,
                               config.n_draw, calib, seed, normalizer, config.loss_clip)
    stats = refine_draws(theta_pi, benchmark, loss_id, config.radii, config.n_draw, calib, seed,
                         normalizer, config.loss_clip)
    cp, cs = estimate_cp_cs(stats, L, config.lambda_grid)
    curve = cgf_curve(stats, L, config.lambda_grid)
    return TaskConstants(loss_id, L, cp, cs, config.loss_clip, seed, config.radii, tuple(config.tau_grid),
                         tuple(config.lambda_grid), tuple(s1), tuple(cand), tuple(s2), tuple(curve), cp)


# --------------------------------------------------------------------------
# audit


@dataclass
class AuditResult:
    loss_id: str
    poincare_ok: bool
    sobolev_ok: bool
    worst_poincare: float  # max over models of Var / (C_P mean clip g)
    worst_sobolev: float  # max over models and lambda of 2 Lambda / (C_S lam^2 mean clip g)
    radii: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.poincare_ok and self.sobolev_ok


def audit(theta_pi, benchmark, c: TaskConstants, calib, n_models: int, seed: int, normalizer=None,
          tol: float = 1e-9, radii=None) -> AuditResult:
    """Check the clipped inequalities on fresh models at radius <= 1.

    Radii default to uniform draws on ``(0, 1]``.
    """
    rng = np.random.default_rng(derive_seed(seed, "audit", c.loss_id))
    radii = list(radii) if radii is not None else list(1.0 - rng.uniform(0.0, 1.0, n_models))
    worst_p = worst_s = 0.0
    for k, r in enumerate(radii):
        s = draw_stats(theta_pi, benchmark, c.loss_id, calib, r, derive_seed(seed, "audit-model", c.loss_id, k),
                       normalizer, c.loss_clip)
        g = float(np.mean(clip(s.grad_sq, c.L)))
        var = float(np.var(s.losses))
        worst_p = max(worst_p, var / (c.C_P * g) if g > 0 else (math.inf if var > 0 else 0.0))
        for lam in c.lambda_grid:
            cgf2 = 2.0 * log_cgf(s.losses, lam)
            rhs = c.C_S * lam * lam * g
            worst_s = max(worst_s, cgf2 / rhs if rhs > 0 else (math.inf if cgf2 > 0 else 0.0))
    return AuditResult(c.loss_id, worst_p <= 1 + tol, worst_s <= 1 + tol, worst_p, worst_s, radii)


# --------------------------------------------------------------------------
# persistence: one JSON object per line, keyed by loss id


def save_constants(path, constants: dict, meta: dict | None = None) -> None:
    lines = []
    if meta:
        lines.append(json.dumps({"meta": meta}, sort_keys=True))
    for c in constants.values():
        lines.append(json.dumps(asdict(c), sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_constants(path):
    """Return ``(constants_by_loss, meta)``."""
    out, meta = {}, {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if "meta" in rec:
                meta = rec["meta"]
                continue
            c = TaskConstants(**rec)
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ParseError(f"bad constants record: {exc}", line=lineno) from None
        out[c.loss_id] = c
    return out, meta
