"""Pipeline stages and the artifacts they exchange inside a run directory.

Layout of a run directory::

    config.json
    data/<loss>.csv
    prior.ckpt, prior_log.csv
    constants.jsonl
    prior_stats.json
    posterior.ckpt, posterior_log.csv
    bounds.csv, bounds.txt
    diagnostics/gradients.csv

Every stage reads only what earlier stages wrote, so a stage can be rerun in
isolation. Each artifact records the config hash and seed it was built with.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as datamod
from .bounds import GaussianMeasure, MCStats, mc_statistics
from .config import RunConfig
from .constants import estimate_constants, load_constants, save_constants
from .errors import ContractError, MissingArtifactError, ParseError
from .model import Field, Normalizer, load_checkpoint, sample_at_distance, save_checkpoint
from .pde import get_benchmark, loss_eval
from .posterior import SurrogateChoice, finalize_report, train_posterior
from .train import train_prior, write_log
from ._rng import derive_seed

log = logging.getLogger(__name__)

ARTIFACTS = {
    "config": ("config.json", "generate-data"),
    "data": ("data", "generate-data"),
    "prior": ("prior.ckpt", "train-prior"),
    "constants": ("constants.jsonl", "estimate-constants"),
    "posterior": ("posterior.ckpt", "train-posterior"),
    "prior_stats": ("prior_stats.json", "train-posterior"),
    "bounds": ("bounds.csv", "compute-bounds"),
}


def provenance(config: RunConfig) -> dict:
    return {"config_hash": config.digest(), "seed": config.seed}


def artifact(run_dir, key: str, stage: str) -> Path:
    """Path of an upstream artifact, or :class:`MissingArtifactError` naming its producer."""
    name, producer = ARTIFACTS[key]
    path = Path(run_dir) / name
    if not path.exists():
        raise MissingArtifactError(f"{stage} needs {path}; run `{producer}` first")
    return path


# --------------------------------------------------------------------------
# loading helpers


def load_config(run_dir) -> RunConfig:
    return RunConfig.load(artifact(run_dir, "config", "this stage"))


def load_datasets(run_dir, config: RunConfig, stage: str) -> dict:
    folder = artifact(run_dir, "data", stage)
    out = {}
    for lid in get_benchmark(config.benchmark).loss_ids:
        path = folder / f"{lid}.csv"
        if not path.exists():
            raise MissingArtifactError(f"{stage} needs {path}; run `generate-data` first")
        out[lid] = datamod.load(path)
    return out


def fit_normalizer(datasets: dict) -> Normalizer:
    """Input standardisation from the interior-residual calibration split, frozen afterwards."""
    return Normalizer.fit(datasets["p"].split("calibration")[:, :2])


def posterior_splits(datasets: dict, config: RunConfig) -> dict:
    """Posterior rows per loss; the data loss keeps only its first ``m_d`` rows."""
    out = {}
    for lid, ds in datasets.items():
        rows = ds.split("posterior", config.m_d if lid == "d" else None)
        if len(rows):
            out[lid] = rows
    return out


def heldout_splits(datasets: dict) -> dict:
    return {lid: ds.split("test") for lid, ds in datasets.items() if ds.sizes["test"]}


def _stats_to_json(stats: dict) -> dict:
    return {lid: {"risk": [repr(float(v)) for v in s.risk], "grad_sum": [repr(float(v)) for v in s.grad_sum]}
            for lid, s in stats.items()}


def _stats_from_json(d: dict) -> dict:
    return {lid: MCStats(np.array([float(v) for v in s["risk"]]), np.array([float(v) for v in s["grad_sum"]]))
            for lid, s in d.items()}


def load_prior_stats(run_dir, config: RunConfig, stage: str) -> dict:
    doc = json.loads(artifact(run_dir, "prior_stats", stage).read_text())
    if doc.get("config_hash") != config.digest():
        raise ContractError(f"{run_dir}/prior_stats.json was built with another config")
    return _stats_from_json(doc["stats"])


# --------------------------------------------------------------------------
# stages


def generate_data(config: RunConfig, run_dir) -> dict:
    run = Path(run_dir)
    (run / "data").mkdir(parents=True, exist_ok=True)
    config.save(run / "config.json")
    datasets = datamod.generate_all(config.benchmark, config.sizes(), config.seed, config.label_noise)
    for lid, ds in datasets.items():
        datamod.save(ds, run / "data" / f"{lid}.csv", extra={"config_hash": config.digest()})
    return datasets


def stage_train_prior(config: RunConfig, run_dir):
    run = Path(run_dir)
    datasets = load_datasets(run, config, "train-prior")
    normalizer = fit_normalizer(datasets)
    ckpt_dir = run / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    result = train_prior(config, datasets, normalizer=normalizer, checkpoint_dir=ckpt_dir)
    save_checkpoint(run / "prior.ckpt", result.theta, seed=config.seed, normalizer=normalizer,
                    extra=provenance(config))
    write_log(run / "prior_log.csv", result.history, provenance(config))
    return result


def stage_estimate_constants(config: RunConfig, run_dir) -> dict:
    run = Path(run_dir)
    datasets = load_datasets(run, config, "estimate-constants")
    theta_pi, normalizer, _ = load_checkpoint(artifact(run, "prior", "estimate-constants"))
    b = get_benchmark(config.benchmark)
    out = {}
    for lid in b.loss_ids:
        if lid == "d" and config.borrow_ic_constants_for_data:
            continue
        calib = datasets[lid].split("calibration")
        out[lid] = estimate_constants(theta_pi, b, lid, calib, config, normalizer)
    if config.borrow_ic_constants_for_data:
        out["d"] = out["ic"].borrowed("d")
    save_constants(run / "constants.jsonl", out, provenance(config))
    return out


def _load_stage_inputs(run, config, stage):
    datasets = load_datasets(run, config, stage)
    theta_pi, normalizer, _ = load_checkpoint(artifact(run, "prior", stage))
    constants, _ = load_constants(artifact(run, "constants", stage))
    return datasets, theta_pi, normalizer, constants


def stage_train_posterior(config: RunConfig, run_dir):
    run = Path(run_dir)
    datasets, theta_pi, normalizer, constants = _load_stage_inputs(run, config, "train-posterior")
    post = posterior_splits(datasets, config)
    b = get_benchmark(config.benchmark)
    prior_stats = mc_statistics(GaussianMeasure(theta_pi, config.sigma_sq), b, post, config.mc_draws,
                                config.seed, normalizer, threads=config.threads)
    (run / "prior_stats.json").write_text(json.dumps(
        {**provenance(config), "stats": _stats_to_json(prior_stats)}, sort_keys=True) + "\n")
    choice = SurrogateChoice(config.family, config.surrogate_mode)
    result = train_posterior(theta_pi, constants, post, choice, config, normalizer=normalizer,
                             prior_grad_sums={l: s.mean_grad_sum for l, s in prior_stats.items()})
    save_checkpoint(run / "posterior.ckpt", result.theta, seed=config.seed, normalizer=normalizer,
                    extra=provenance(config))
    write_log(run / "posterior_log.csv", result.history, provenance(config))
    return result


def stage_compute_bounds(config: RunConfig, run_dir):
    run = Path(run_dir)
    datasets, theta_pi, normalizer, constants = _load_stage_inputs(run, config, "compute-bounds")
    theta_rho, _, _ = load_checkpoint(artifact(run, "posterior", "compute-bounds"))
    prior_stats = load_prior_stats(run, config, "compute-bounds")
    report = finalize_report(theta_rho, theta_pi, constants, posterior_splits(datasets, config),
                             heldout_splits(datasets), config, normalizer, prior_stats,
                             meta=provenance(config), threads=config.threads)
    (run / "bounds.csv").write_text(report.to_csv())
    (run / "bounds.txt").write_text(report.to_text())
    return report


def run_all(config: RunConfig, run_dir):
    """Every stage in order; returns the :class:`BoundReport`."""
    generate_data(config, run_dir)
    stage_train_prior(config, run_dir)
    stage_estimate_constants(config, run_dir)
    stage_train_posterior(config, run_dir)
    return stage_compute_bounds(config, run_dir)


# --------------------------------------------------------------------------
# gradient diagnostics


DIAG_RADII = (0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0)


def diagnose_gradients(config: RunConfig, run_dir, radii=DIAG_RADII, n_models: int = 5,
                       loss_ids=("d", "p")) -> list:
    """Largest input-gradient norm over the calibration split, for models at each distance."""
    run = Path(run_dir)
    datasets = load_datasets(run, config, "diagnose-gradients")
    theta_pi, normalizer, _ = load_checkpoint(artifact(run, "prior", "diagnose-gradients"))
    b = get_benchmark(config.benchmark)
    rows = []
    for lid in loss_ids:
        calib = datasets[lid].split("calibration")
        if not len(calib):
            continue
        for r in radii:
            for k in range(1 if r == 0 else n_models):
                theta = sample_at_distance(theta_pi, r, derive_seed(config.seed, "diagnose", lid, k))
                _, g = loss_eval(Field(theta, theta.spec, normalizer), b, lid, calib)
                rows.append({"loss_id": lid, "radius": float(r), "draw": k,
                             "max_grad_norm": float(np.sqrt(np.max(g)))})
    out = run / "diagnostics"
    out.mkdir(exist_ok=True)
    write_log(out / "gradients.csv", rows, provenance(config))
    return rows


# --------------------------------------------------------------------------
# reports


def read_csv(path) -> list:
    """Rows of a CSV whose optional first line is a ``#`` provenance comment."""
    with open(path, newline="") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(lines))


@dataclass
class ReportFiles:
    table: Path
    plots: list


def make_report(run_dirs: list, out_dir) -> ReportFiles:
    """Collect ``bounds.csv`` from each run into one table plus SVG figures."""
    from . import svgplot

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for d in run_dirs:
        path = artifact(d, "bounds", "report")
        for row in read_csv(path):
            rows.append({"run": str(d), **row})
    if not rows:
        raise ParseError("no bound rows found")
    fields = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    table = out / "bounds_table.csv"
    with open(table, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, restval="", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)

    plots = []
    from .bounds import BOUND_COLUMNS

    for bench in sorted({r["benchmark"] for r in rows}):
        sel = [r for r in rows if r["benchmark"] == bench]
        test = [float(r["test_total"]) for r in sel]
        series = [svgplot.Series(col, test, [float(r[col]) for r in sel], "scatter") for col in BOUND_COLUMNS]
        lo, hi = min(test), max(test)
        series.append(svgplot.Series("test risk", [lo, hi], [lo, hi], "line"))
        path = out / f"bound_vs_test_{bench}.svg"
        svgplot.save(path, series, title=f"{bench}: bound vs test risk", xlabel="total test risk",
                     ylabel="bound", logy=True)
        plots.append(path)

    for d in run_dirs:
        tag = Path(d).name
        diag = Path(d) / "diagnostics" / "gradients.csv"
        if diag.exists():
            g = read_csv(diag)
            series = [svgplot.Series(f"l_{lid}", [float(r["radius"]) for r in g if r["loss_id"] == lid],
                                     [float(r["max_grad_norm"]) for r in g if r["loss_id"] == lid], "scatter")
                      for lid in sorted({r["loss_id"] for r in g})]
            path = out / f"gradient_vs_distance_{tag}.svg"
            svgplot.save(path, series, title="max input-gradient norm vs distance", xlabel="distance R",
                         ylabel="max ||grad l||", logy=True)
            plots.append(path)
        cpath = Path(d) / "constants.jsonl"
        if cpath.exists():
            consts, _ = load_constants(cpath)
            series = []
            for lid, c in consts.items():
                if c.cgf_curve:
                    series.append(svgplot.Series(f"{lid} CGF ratio", c.lambda_grid, c.cgf_curve))
                    series.append(svgplot.Series(f"{lid} variance ratio", [c.lambda_grid[0], c.lambda_grid[-1]],
                                                 [c.variance_ratio_max] * 2))
            if series:
                path = out / f"cgf_ratio_{tag}.svg"
                svgplot.save(path, series, title="CGF ratio vs lambda", xlabel="lambda", ylabel="ratio",
                             logx=True, logy=True)
                plots.append(path)
    return ReportFiles(table, plots)
