"""Command line front end: run experiments, plot metrics, compare runs."""

from __future__ import annotations

import argparse
import glob
import sys
from pathlib import Path

from .harness import (
    compare_runs,
    emit_plot,
    parse_config,
    read_records,
    run_experiment,
)


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.seeds:
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    if args.out:
        cfg.out_dir = args.out
    cfg.validate()
    _, paths = run_experiment(cfg)
    for p in paths:
        print(p)
    return 0


def _expand(pattern: str) -> list[str]:
    paths = sorted(glob.glob(pattern))
    if not paths:
        print(f"no runs match {pattern!r}", file=sys.stderr)
    return paths


def _cmd_plot(args) -> int:
    paths = _expand(args.runs)
    if not paths:
        return 1
    runs = [(Path(p).stem, read_records(p)) for p in paths]
    emit_plot(runs, args.metric, args.out, x_field=args.x)
    print(args.out)
    return 0


def _cmd_compare(args) -> int:
    paths = _expand(args.runs)
    if not paths:
        return 1
    report = compare_runs(paths, args.window)
    print(report.to_text())
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="replaylab",
                                     description="replay-augmented RL experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the seeded runs of a config")
    p_run.add_argument("--config", required=True, help="YAML experiment config")
    p_run.add_argument("--seeds", help="comma-separated seed override, e.g. 10,11,12")
    p_run.add_argument("--out", help="output directory override")
    p_run.set_defaults(fn=_cmd_run)

    p_plot = sub.add_parser("plot", help="render metric curves from run CSVs to SVG")
    p_plot.add_argument("--runs", required=True, help="glob of run CSV files")
    p_plot.add_argument("--metric", required=True, help="CSV column to plot")
    p_plot.add_argument("--out", required=True, help="output SVG path")
    p_plot.add_argument("--x", default="episode", choices=["episode", "steps"],
                        help="x-axis column")
    p_plot.set_defaults(fn=_cmd_plot)

    p_cmp = sub.add_parser("compare", help="final-window comparison across runs")
    p_cmp.add_argument("--runs", required=True, help="glob of run CSV files")
    p_cmp.add_argument("--window", type=int, default=20,
                       help="number of trailing episodes to average")
    p_cmp.set_defaults(fn=_cmd_compare)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
