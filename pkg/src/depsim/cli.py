"""Command-line front end: run, validate and sweep scenarios."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .dependsched import POLICIES
from .engine import SimulationError
from .metrics import RunReport
from .scenario import ParseError, ValidationError, export, load_scenario, run

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3


def _seed_range(text: str) -> range:
    lo, sep, hi = text.partition("..")
    try:
        a = int(lo)
        b = int(hi) if sep else a
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A..B, got {text!r}") from None
    if b < a:
        raise argparse.ArgumentTypeError("empty seed range")
    return range(a, b + 1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="depsim", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario and write CSV outputs")
    r.add_argument("scenario", help="scenario file or shipped scenario name")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--until", type=float, default=None, help="simulation horizon in seconds")
    r.add_argument("--out", default="out")
    r.add_argument("--policy", choices=POLICIES, default=None)
    r.add_argument("--no-reschedule", action="store_true")

    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("scenario")

    s = sub.add_parser("sweep", help="run a scenario over a range of seeds")
    s.add_argument("scenario")
    s.add_argument("--seeds", type=_seed_range, required=True, metavar="A..B")
    s.add_argument("--out", required=True)
    s.add_argument("--until", type=float, default=None)
    s.add_argument("--policy", choices=POLICIES, default=None)
    s.add_argument("--no-reschedule", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_scenario(args.scenario)
    except (ParseError, ValidationError) as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"cannot read {args.scenario}: {e}", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "validate":
        print(f"{args.scenario}: ok ({len(cfg.sections)} sections)")
        return EXIT_OK

    resched = False if args.no_reschedule else None
    try:
        if args.command == "run":
            res = run(cfg, args.seed, args.until, args.policy, resched)
            export(res, args.out)
            print(RunReport.header())
            print(res.report.csv_row())
            return EXIT_OK
        rows = []
        for seed in args.seeds:
            res = run(cfg, seed, args.until, args.policy, resched)
            export(res, Path(args.out) / f"seed-{seed}")
            rows.append(res.report.csv_row())
        Path(args.out, "summary.csv").write_text(
            RunReport.header() + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
        print(f"{len(rows)} runs written to {args.out}")
        return EXIT_OK
    except (SimulationError, ValueError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
