"""Command-line entry point: ``bdfsplit {gen,run,export,verify}``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .export import PLOT_KINDS, ExportError, export_plotdata
from .runner import generate_instances, run_benchmark
from .verify import SchemaError, verify_tables


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdfsplit",
                                description="Convex splitting solvers: benchmark harness")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen", help="write the instances of a config to disk")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="output directory (overrides the config)")
    g.add_argument("--seed", type=int, help="base seed (overrides the config)")

    r = sub.add_parser("run", help="run the algorithm x instance matrix")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (overrides the config)")
    r.add_argument("--workers", type=int, help="parallel worker processes")
    r.add_argument("--seed", type=int, help="base seed (overrides the config)")

    e = sub.add_parser("export", help="tidy plot data from trace CSVs")
    e.add_argument("traces", nargs="+", help="trace CSV files")
    e.add_argument("--kind", choices=PLOT_KINDS, default="residual-vs-iter")
    e.add_argument("--reference", help="trace of the high-accuracy reference run")
    e.add_argument("--out", required=True, help="output CSV path")

    v = sub.add_parser("verify", help="check an aggregate table against expectations")
    v.add_argument("--aggregate", required=True)
    v.add_argument("--expectations", required=True)
    v.add_argument("--timing", help="timing CSV (default: next to the aggregate)")

    c = sub.add_parser("check-config", help="validate a config without running it")
    c.add_argument("--config", required=True)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "gen":
        return generate_instances(args.config, args.out, args.seed)
    if args.verb == "run":
        if args.workers is not None and args.workers < 1:
            print("error: --workers must be >= 1", file=sys.stderr)
            return 2
        return run_benchmark(args.config, args.out, args.workers, args.seed)
    if args.verb == "export":
        try:
            rows = export_plotdata(args.traces, args.kind, args.out, args.reference)
        except ExportError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"wrote {len(rows)} rows to {args.out}")
        return 0
    if args.verb == "verify":
        try:
            report = verify_tables(args.aggregate, args.expectations, args.timing)
        except (SchemaError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print("\n".join(report.lines()))
        return 0 if report.passed else 1
    if args.verb == "check-config":
        try:
            cfg = load_config(args.config)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"ok: {cfg.problem.kind}, {len(cfg.algorithms)} algorithms, "
              f"{len(cfg.criteria)} criteria, seeds {cfg.problem.instance_seeds()}")
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
