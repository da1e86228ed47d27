"""Command line interface.

Subcommands: run (precision sweep over a dataset), bounds (static error
analysis), macs (multiply-accumulate count), estimate (inferences/s from a
user-supplied operation budget table). Report-producing subcommands render
a PNG next to the CSV with the same stem.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import harness
from .bounds import analyze, write_bounds_csv
from .model import count_macs, load_model


def _split_multi(values: List[str]) -> List[str]:
    """Accept both repeated tokens and comma-joined lists."""
    out = []
    for v in values:
        out.extend(x for x in v.split(",") if x)
    return out


def _parse_pbits(text: str) -> tuple:
    if ".." in text:
        lo, hi = text.split("..", 1)
    else:
        lo = hi = text
    try:
        return int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad pbits range {text!r}, expected LO..HI") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="certinfer")
    sub = p.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="sweep precisions and score top-1 agreement")
    runp.add_argument("--model", required=True)
    runp.add_argument("--dataset", required=True)
    runp.add_argument("--arith", required=True, choices=["float", "fixed"])
    runp.add_argument("--pbits", required=True, type=_parse_pbits, metavar="LO..HI")
    runp.add_argument("--round", nargs="+", default=["rne"], metavar="MODE")
    runp.add_argument("--sum", nargs="+", default=["naive"], metavar="ALG")
    runp.add_argument("--dot", nargs="+", default=["naive"], metavar="ALG")
    runp.add_argument("--samples", type=int, default=None)
    runp.add_argument("--workers", type=int, default=1)
    runp.add_argument("--mbits", type=int, default=10, help="fixed-point integer bits")
    runp.add_argument("--resume", action="store_true")
    runp.add_argument("--no-plot", action="store_true", help="skip the PNG next to the CSV")
    runp.add_argument("--out", required=True)

    bp = sub.add_parser("bounds", help="static fixed-point error bounds per layer")
    bp.add_argument("--model", required=True)
    bp.add_argument("--fbits", required=True, type=int)
    bp.add_argument("--dot", choices=["accurate", "naive"], default="accurate")
    bp.add_argument("--mode", choices=["auto", "affine", "interval"], default="auto")
    bp.add_argument("--no-plot", action="store_true")
    bp.add_argument("--out", required=True)

    mp = sub.add_parser("macs", help="count multiply-accumulates for one inference")
    mp.add_argument("--model", required=True)

    ep = sub.add_parser("estimate", help="inferences/s from an ops budget table")
    ep.add_argument("--budget-table", required=True)
    ep.add_argument("--model", required=True)
    return p


def _cmd_run(args) -> int:
    lo, hi = args.pbits
    spec = harness.SweepSpec(
        model=args.model,
        dataset=args.dataset,
        arith=args.arith,
        pbits_lo=lo,
        pbits_hi=hi,
        rounds=_split_multi(args.round),
        sums=_split_multi(args.sum),
        dots=_split_multi(args.dot),
        samples=args.samples,
        workers=args.workers,
        mbits=args.mbits,
    )

    def progress(row):
        print(
            f"{row.arith}/{row.dot}/{row.sum}/{row.round} pbits={row.pbits}: "
            f"{row.agreement_pct:.2f}% ({row.failures} failed)",
            file=sys.stderr,
        )

    rows = harness.run_sweep(spec, args.out, resume=args.resume, progress=progress)
    if not rows:
        print("no valid configuration points in the requested grid", file=sys.stderr)
        return 2
    if not args.no_plot:
        from .plotting import plot_sweep

        png = Path(args.out).with_suffix(".png")
        plot_sweep(harness.read_report(args.out), png)
        print(f"wrote {args.out} and {png}", file=sys.stderr)
    else:
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


def _cmd_bounds(args) -> int:
    graph = load_model(args.model)
    rows = analyze(graph, args.fbits, dot=args.dot, mode=args.mode)
    write_bounds_csv(rows, args.out)
    if not args.no_plot:
        from .plotting import plot_bounds

        png = Path(args.out).with_suffix(".png")
        plot_bounds(rows, png)
        print(f"wrote {args.out} and {png}", file=sys.stderr)
    else:
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


def _cmd_macs(args) -> int:
    print(count_macs(load_model(args.model)))
    return 0


def _cmd_estimate(args) -> int:
    macs = count_macs(load_model(args.model))
    rows = harness.load_budget_table(args.budget_table)
    writer = csv.writer(sys.stdout)
    header = list(rows[0].keys()) if rows else ["ops_budget"]
    writer.writerow(header + ["macs", "est_inf_per_s"])
    for row in rows:
        rate = harness.estimate_inferences_per_sec(float(row["ops_budget"]), macs)
        writer.writerow([row.get(k, "") for k in header] + [str(macs), f"{rate:.6g}"])
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "run": _cmd_run,
        "bounds": _cmd_bounds,
        "macs": _cmd_macs,
        "estimate": _cmd_estimate,
    }[args.command]
    try:
        return handler(args)
    except Exception as exc:  # subcommand-level error -> nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
