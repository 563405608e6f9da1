"""Command-line entry point: ``piml-pacbayes <stage> --run DIR [--key value ...]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, make_config
from .errors import ContractError, EstimationFailure, MissingArtifactError, NumericFailure, ParseError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4

log = logging.getLogger("piml_pacbayes")


def _parse_bool(s: str) -> bool:
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _converter(default):
    """String-to-value parser matching the type of a config default."""
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, tuple):
        elem = float if any(isinstance(v, float) for v in default) else int
        return lambda s: tuple(elem(v) for v in s.split(",") if v.strip())
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


_NONE_DEFAULT_TYPES = {"m_d": int, "n_iter_prior": int, "sigma2": float, "mode": str, "delta_prime": float}


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides (long names match config keys)")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.default is None:
            base = _NONE_DEFAULT_TYPES[f.name]
            conv = lambda s, base=base: None if s.lower() == "none" else base(s)  # noqa: E731
        else:
            conv = _converter(f.default)
        g.add_argument(flag, dest=f"cfg_{f.name}", type=conv, default=argparse.SUPPRESS, metavar="V")


def overrides(ns: argparse.Namespace) -> dict:
    return {k[4:]: v for k, v in vars(ns).items() if k.startswith("cfg_")}


def resolve_config(ns: argparse.Namespace, fresh: bool) -> RunConfig:
    """``--config`` file (or the run's own config), then flag overrides."""
    over = overrides(ns)
    if ns.config is not None:
        base = RunConfig.load(ns.config).to_dict()
    elif not fresh:
        base = pipeline.load_config(ns.run).to_dict()
    else:
        return make_config(over.pop("profile", "desk"), **over)
    base.update(over)
    return RunConfig.from_dict(base)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="piml-pacbayes",
                                     description="PAC-Bayes bounds for physics-informed networks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("generate-data", "sample collocation and observation points"),
        ("train-prior", "train the prior network on the physics losses"),
        ("estimate-constants", "estimate (L, C_P, C_S) per loss"),
        ("train-posterior", "optimise the posterior mean on a surrogate bound"),
        ("compute-bounds", "evaluate every bound family and write bounds.csv"),
        ("diagnose-gradients", "max input-gradient norm as a function of distance from the prior"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--run", required=True, type=Path, help="run directory")
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        add_config_flags(p)
        if name == "diagnose-gradients":
            p.add_argument("--distances", type=lambda s: tuple(float(v) for v in s.split(",")),
                           default=pipeline.DIAG_RADII, help="comma-separated distances from the prior")
            p.add_argument("--n-models", type=int, default=5)
    p = sub.add_parser("report", help="tables and SVG plots from one or more runs")
    p.add_argument("--runs", nargs="+", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    return parser


def _summary(rows: list) -> str:
    head = f"{'benchmark':<11}{'m_d':>6}{'test':>10}{'Ours-Sob':>10}{'Ours-Poi':>10}{'U-Sob':>10}{'U-Poi':>10}{'Pooled':>10}"
    lines = [head]
    for r in rows:
        vals = [r.get(k, "") for k in ("test_total", "ours_sob", "ours_poi", "u_sob", "u_poi", "pooled_physics")]
        lines.append(f"{r['benchmark']:<11}{r.get('m_d', ''):>6}" + "".join(f"{float(v):>10.4g}" for v in vals))
    return "\n".join(lines)


def run(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if ns.command == "report":
        files = pipeline.make_report(ns.runs, ns.out)
        print(_summary(pipeline.read_csv(files.table)))
        for f in [files.table, *files.plots]:
            print(f)
        return EXIT_OK
    cfg = resolve_config(ns, fresh=ns.command == "generate-data")
    if ns.command == "generate-data":
        pipeline.generate_data(cfg, ns.run)
    elif ns.command == "train-prior":
        res = pipeline.stage_train_prior(cfg, ns.run)
        print(f"prior risk {res.history[-1]['risk']:.6g}" if res.history else "prior unchanged")
    elif ns.command == "estimate-constants":
        for lid, c in pipeline.stage_estimate_constants(cfg, ns.run).items():
            print(f"{lid:<4} L={c.L:.6g} C_P={c.C_P:.6g} C_S={c.C_S:.6g}")
    elif ns.command == "train-posterior":
        res = pipeline.stage_train_posterior(cfg, ns.run)
        if res.history:
            print(f"surrogate {res.history[0]['surrogate']:.6g} -> {res.history[-1]['surrogate']:.6g}")
    elif ns.command == "compute-bounds":
        report = pipeline.stage_compute_bounds(cfg, ns.run)
        print(report.to_text(), end="")
    elif ns.command == "diagnose-gradients":
        rows = pipeline.diagnose_gradients(cfg, ns.run, ns.distances, ns.n_models)
        print(f"{len(rows)} rows -> {Path(ns.run) / 'diagnostics' / 'gradients.csv'}")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericFailure, EstimationFailure) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
