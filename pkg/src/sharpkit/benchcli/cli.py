"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 run failure (non-finite loss),
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from ..modelzoo import SpecError
from . import config as cfgmod
from .harness import aggregate, compare, read_records, recompute_spectrum, run_experiment
from .tables import render_table

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_IO = 0, 1, 2, 3


def _seeds(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sharpkit", description="Train, compare and inspect sharpness-aware optimizer runs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one config over its seeds")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default="runs")
    run.add_argument("--seeds", type=_seeds)
    run.add_argument("--format", choices=["md", "csv"], default="md")

    cmp = sub.add_parser("compare", help="run several configs and tabulate medians")
    cmp.add_argument("--configs", nargs="+", required=True)
    cmp.add_argument("--format", choices=["md", "csv"], default="md")
    cmp.add_argument("--out", default="runs")
    cmp.add_argument("--seeds", type=_seeds)

    spec = sub.add_parser("spectrum", help="show the Hessian report of a stored run")
    spec.add_argument("--run", required=True, dest="run_id")
    spec.add_argument("--out", default="runs")
    spec.add_argument("--recompute", action="store_true", help="recompute from stored weights")

    sw = sub.add_parser("sweep", help="grid over one config key")
    sw.add_argument("--config", required=True)
    sw.add_argument("--param", required=True)
    sw.add_argument("--values", required=True)
    sw.add_argument("--format", choices=["md", "csv"], default="md")
    sw.add_argument("--out", default="runs")
    sw.add_argument("--seeds", type=_seeds)
    return p


def _load(path, seeds):
    cfg = cfgmod.load(path)
    return cfgmod.with_seeds(cfg, seeds) if seeds else cfg


def _cmd_run(args) -> int:
    cfg = _load(args.config, args.seeds)
    records = run_experiment(cfg, args.out)
    for r in records:
        print(f"{r.run_id}\t{r.label}\tseed={r.seed}\t{r.status}\t{r.diagnostic}", file=sys.stderr)
    ok = [r for r in records if r.ok]
    if ok:
        print(render_table(ok, args.format), end="")
    return EXIT_OK if len(ok) == len(records) else EXIT_RUN


def _cmd_compare(args) -> int:
    cfgs = [_load(p, args.seeds) for p in args.configs]
    failed = []

    def runner(c, out):
        recs = run_experiment(c, out)
        failed.extend(r for r in recs if not r.ok)
        return recs

    rows = compare(cfgs, args.out, runner=runner)
    print(render_table(rows, args.format), end="")
    return EXIT_RUN if failed else EXIT_OK


def _cmd_spectrum(args) -> int:
    matches = [r for r in read_records(args.out) if r.run_id == args.run_id]
    if not matches:
        print(f"no run {args.run_id!r} in {args.out}", file=sys.stderr)
        return EXIT_IO
    rec = matches[-1]
    if args.recompute:
        report = recompute_spectrum(rec)
    elif rec.spectrum is None:
        print(f"run {rec.run_id} has no spectrum ({rec.status})", file=sys.stderr)
        return EXIT_RUN
    else:
        report = rec.spectrum
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    base = _load(args.config, args.seeds)
    rows, failed = [], False
    for value in (v.strip() for v in args.values.split(",") if v.strip()):
        cfg = cfgmod.with_override(base, args.param, value)
        cfg = replace(cfg, label=f"{cfg.display_name} {args.param}={value}")
        recs = run_experiment(cfg, args.out)
        failed |= any(not r.ok for r in recs)
        rows.append(aggregate(cfg.display_name, recs))
    print(render_table(rows, args.format), end="")
    return EXIT_RUN if failed else EXIT_OK


COMMANDS = {
    "run": _cmd_run,
    "compare": _cmd_compare,
    "spectrum": _cmd_spectrum,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (cfgmod.ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
