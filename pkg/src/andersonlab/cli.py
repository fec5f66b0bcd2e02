"""Command line entry point: ``andersonlab <subcommand> --config cfg.json --out DIR``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import __version__
from .plotting import PLOT_KINDS, PlotError, plot
from .runner import (
    EXIT_ASSERTION,
    EXIT_BUDGET,
    EXIT_OK,
    EXIT_SCHEMA,
    BudgetError,
    ConfigError,
    load_config,
    run,
)

log = logging.getLogger("andersonlab")

SUBCOMMAND_KIND = {
    "sample": "sample",
    "renorm": "renorm-scan",
    "spectrum": "spectrum",
    "ids": "ids",
    "weyl": "weyl",
    "besov": "besov-scan",
    "additivity": "additivity",
    "transform-check": "transform-check",
}

# which figure each experiment's report renders, and from which artifacts
REPORT_PLOTS = {
    "ids": ("ids", "ids_*.csv"),
    "weyl": ("weyl", "weyl_counts.csv"),
    "renorm-scan": ("renorm", "renorm_scan.csv"),
    "besov-scan": ("besov", "besov_profile.csv"),
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes over seeds")
    p.add_argument("--seed-base", type=int, default=0, help="offset added to every seed")
    p.add_argument("--no-registry", action="store_true", help="do not append to the run registry")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="andersonlab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMAND_KIND:
        _add_run_flags(sub.add_parser(name, help=f"run a {SUBCOMMAND_KIND[name]} experiment"))
    p = sub.add_parser("plot", help="render artifacts to SVG")
    p.add_argument("artifacts", nargs="*", type=Path)
    p.add_argument("--kind", required=True, choices=PLOT_KINDS)
    p.add_argument("--out", required=True, type=Path, help="SVG file to write")
    p.add_argument("--volume", type=float, default=1.0, help="box volume for Weyl ratios")
    p.add_argument("--dim", type=int, default=2)
    p = sub.add_parser("report", help="run an experiment and render its figures")
    _add_run_flags(p)
    return parser


def _run_from_args(args, expected_kind: str | None) -> int:
    try:
        cfg = load_config(args.config)
        if expected_kind is not None and cfg["experiment"] != expected_kind:
            raise ConfigError(f"config experiment {cfg['experiment']!r} does not match subcommand ({expected_kind})")
        record = run(cfg, args.out, args.jobs, args.seed_base, registry=not args.no_registry)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except BudgetError as exc:
        print(f"resource budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    if args.command == "report":
        _render_report(record, cfg)
    print(json.dumps({"out": record.out_dir, "passed": record.passed, "summary": record.summary}, sort_keys=True))
    if not record.passed:
        failed = sorted(k for k, v in record.assertions.items() if not v)
        print(f"assertions failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_ASSERTION
    return EXIT_OK


def _render_report(record, cfg: dict) -> list[Path]:
    out = Path(record.out_dir)
    spec = REPORT_PLOTS.get(record.experiment)
    if spec is None:
        return []
    kind, pattern = spec
    paths = sorted(out.glob(pattern))
    kwargs = {}
    if kind == "weyl":
        side = cfg.get("box", {}).get("side", cfg.get("side_length", 1.0))
        dim = cfg.get("dim", 2)
        volume = math.prod(side) if isinstance(side, list) else float(side) ** dim
        kwargs = {"volume": float(volume), "dim": dim}
    target = out / f"{kind}.svg"
    plot(paths, kind, target, **kwargs)
    return [target]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "plot":
        kwargs = {"volume": args.volume, "dim": args.dim} if args.kind == "weyl" else {}
        try:
            path = plot(args.artifacts, args.kind, args.out, **kwargs)
        except PlotError as exc:
            print(f"plot error: {exc}", file=sys.stderr)
            return EXIT_SCHEMA
        print(path)
        return EXIT_OK
    if args.command == "report":
        return _run_from_args(args, None)
    return _run_from_args(args, SUBCOMMAND_KIND[args.command])


if __name__ == "__main__":
    raise SystemExit(main())
