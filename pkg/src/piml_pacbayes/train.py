"""Prior training: Adam, mini-batching and gradient-trace loss weighting."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rng import rng_for
from .autodiff import Tape, ops
from .errors import ContractError, NumericFailure
from .model import Field, Normalizer, ParamVector, init_params, save_checkpoint, watch_layers
from .pde import get_benchmark, loss_terms

log = logging.getLogger(__name__)

LAMBDA_MIN, LAMBDA_MAX = 1e-3, 1e3
DIVERGENCE_LIMIT = 1e6


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    decay: float = 0.95
    decay_every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def zeros(cls, n: int, **kw) -> "OptimState":
        return cls(np.zeros(n), np.zeros(n), **kw)

    def current_lr(self) -> float:
        """Learning rate for the next step (staircase exponential decay)."""
        return self.lr * self.decay ** (self.step // self.decay_every)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: OptimState, lr: float | None = None,
              *, loss_id: str | None = None) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns new parameters."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ContractError(f"shape mismatch: theta {theta.shape}, grad {grad.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericFailure("non-finite gradient", iteration=state.step, loss_id=loss_id)
    lr = state.current_lr() if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    return theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# --------------------------------------------------------------------------
# gradients


def flat_gradient(grads: list) -> np.ndarray:
    """Concatenate ``[gW1, gb1, gW2, ...]`` into the flat parameter layout."""
    return np.concatenate([np.ravel(g) for g in grads])


def value_and_grad(theta: ParamVector, objective, normalizer: Normalizer | None = None):
    """Evaluate ``objective(field) -> scalar Var`` and its parameter gradient."""
    with Tape() as tape:
        layers = watch_layers(tape, theta)
        out = objective(Field(layers, theta.spec, normalizer))
        leaves = [v for pair in layers for v in pair]
        grads = tape.gradient(out, leaves)
    return float(out.value), flat_gradient(grads)


def per_sample_sq_norms(theta: ParamVector, benchmark, loss_id: str, samples,
                        normalizer: Normalizer | None = None, residual: bool = False) -> np.ndarray:
    """``||grad_theta l_i(theta, x_j)||^2`` for every row (scaled loss).

    With ``residual=True`` the norm is taken for the scaled residual
    ``sqrt(c) r`` instead, i.e. ``||grad l||^2 / (4 l)``, the diagonal of the
    residual tangent kernel.
    """
    with Tape() as tape:
        layers = watch_layers(tape, theta)
        values, _ = loss_terms(benchmark, loss_id, Field(layers, theta.spec, normalizer), samples, grad=False)
        leaves = [v for pair in layers for v in pair]
        grads = tape.gradient(values, leaves, seed=np.ones_like(values.value), per_sample=True)
    sq = sum(np.sum(g.reshape(len(values.value), -1) ** 2, axis=1) for g in grads)
    if residual:
        # l = 0 exactly forces grad l = 0 as well; the kernel entry is then unknown, count it as 0
        v = values.value
        sq = np.divide(sq, 4.0 * v, out=np.zeros_like(sq), where=v > 0)
    return sq


def ntk_weights(traces: dict) -> dict:
    """``lambda_i = sum_k tr_k / (N_L tr_i)`` clamped to ``[1e-3, 1e3]``."""
    total = sum(traces.values())
    n = len(traces)
    out = {}
    for lid, tr in traces.items():
        if tr <= 0:
            log.warning("zero gradient trace for loss %s; weight set to %g", lid, LAMBDA_MAX)
            out[lid] = LAMBDA_MAX
            continue
        out[lid] = float(np.clip(total / (n * tr), LAMBDA_MIN, LAMBDA_MAX))
    return out


WEIGHTINGS = ("none", "ntk_loss", "ntk_residual")


def update_weights_ntk(theta: ParamVector, benchmark, batches: dict, normalizer=None,
                       residual: bool = False):
    """Return ``(weights, traces)`` from one batch per loss."""
    traces = {
        lid: float(np.mean(per_sample_sq_norms(theta, benchmark, lid, batch, normalizer, residual)))
        for lid, batch in batches.items()
    }
    return ntk_weights(traces), traces


# --------------------------------------------------------------------------
# mini-batches


class BatchSampler:
    """Batches drawn without replacement; reshuffled at every epoch."""

    def __init__(self, rows: np.ndarray, batch_size: int, rng: np.random.Generator):
        if len(rows) == 0:
            raise ContractError("cannot sample batches from an empty split")
        self.rows = rows
        self.batch_size = min(batch_size, len(rows))
        self.rng = rng
        self._order = np.empty(0, dtype=int)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.rows))
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.rows[idx]


def weighted_risk(field, benchmark, batches: dict, weights: dict | None = None, record: dict | None = None):
    """``sum_i lambda_i mean_j l_i`` over one batch per loss, as a ``Var``.

    Unweighted per-loss batch means are written to ``record`` when given.
    """
    total = None
    for lid, batch in batches.items():
        values, _ = loss_terms(benchmark, lid, field, batch, grad=False)
        term = ops.mean(values)
        if record is not None:
            record[lid] = float(term.value)
        if weights is not None:
            term = term * weights[lid]
        total = term if total is None else total + term
    return total


# --------------------------------------------------------------------------
# stage 1


@dataclass
class TrainResult:
    theta: ParamVector
    history: list = field(default_factory=list)
    weights: dict = field(default_factory=dict)
    aborted: bool = False


def train_prior(config, datasets: dict, seed: int | None = None, normalizer: Normalizer | None = None,
                log_path=None, checkpoint_dir=None) -> TrainResult:
    """Minimise the weighted physics risk on the prior splits (data loss excluded)."""
    b = get_benchmark(config.benchmark)
    seed = config.seed if seed is None else seed
    theta = init_params(config.spec, seed)
    physics = [lid for lid in b.physics_ids if lid in datasets]
    prior_rows = {lid: datasets[lid].split("prior") for lid in physics}
    if any(len(r) == 0 for r in prior_rows.values()):
        raise ContractError("prior training needs non-empty prior splits for every physics loss")
    samplers = {lid: BatchSampler(rows, config.batch_size, rng_for(seed, "prior-batches", lid))
                for lid, rows in prior_rows.items()}
    state = OptimState.zeros(len(theta), lr=config.lr_prior, decay=config.lr_decay,
                             decay_every=config.decay_every)
    weights = {lid: 1.0 for lid in physics}
    result = TrainResult(theta, weights=weights)
    last_good = theta
    for it in range(config.prior_iterations):
        batches = {lid: s.next() for lid, s in samplers.items()}
        if config.loss_weighting != "none" and it % config.ntk_every == 0:
            weights, _ = update_weights_ntk(theta, b, batches, normalizer,
                                            residual=config.loss_weighting == "ntk_residual")
        per_loss = {}
        risk, grad = value_and_grad(theta, lambda u: weighted_risk(u, b, batches, weights, per_loss), normalizer)
        if not np.isfinite(risk) or risk > DIVERGENCE_LIMIT:
            log.error("prior training diverged at iteration %d (risk %g)", it, risk)
            result.theta, result.aborted = last_good, True
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / "prior_last_good.ckpt", last_good, seed=seed,
                                normalizer=normalizer, extra={"iteration": it})
            raise NumericFailure(f"prior risk {risk:g} exceeds {DIVERGENCE_LIMIT:g}", iteration=it)
        lr = state.current_lr()
        last_good = theta
        theta = theta.replace(adam_step(theta.values, grad, state))
        result.history.append({"iteration": it, "risk": risk, "lr": lr,
                               **{f"risk_{k}": v for k, v in per_loss.items()},
                               **{f"lambda_{k}": v for k, v in weights.items()}})
        if checkpoint_dir is not None and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"prior_{it + 1:06d}.ckpt", theta, seed=seed,
                            normalizer=normalizer, extra={"iteration": it + 1})
    result.theta, result.weights = theta, weights
    if log_path is not None:
        write_log(log_path, result.history)
    return result


def write_log(path, rows: list, meta: dict | None = None) -> None:
    """CSV of history rows, preceded by a ``# key=value,...`` line when ``meta`` is given."""
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write("# " + ",".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
