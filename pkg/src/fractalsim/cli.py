"""Command line front end: run, validate, dump-state, report.

Exit codes: 0 clean, 2 scenario load or validation error, 3 simulation
invariant violated. --scenario takes a file path or the name of a bundled
scenario (with or without the .scn suffix).
"""

from __future__ import annotations

import argparse
import os
import sys
from importlib import resources

from .cluster import Cluster
from .scenario import apply_overrides, parse_scenario, validate


def bundled_names() -> list[str]:
    root = resources.files("fractalsim").joinpath("scenarios")
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".scn"))


def read_scenario_text(ref: str) -> str:
    """Resolve a path or bundled scenario name to its text."""
    if os.path.exists(ref):
        with open(ref) as fh:
            return fh.read()
    name = ref if ref.endswith(".scn") else f"{ref}.scn"
    res = resources.files("fractalsim").joinpath("scenarios", name)
    if res.is_file():
        return res.read_text()
    raise FileNotFoundError(
        f"no scenario file {ref!r} and no bundled scenario named {ref!r} "
        f"(bundled: {', '.join(bundled_names())})")


def print_diags(diags) -> bool:
    """Print diagnostics; returns True if any was an error."""
    bad = False
    for level, key, message in diags:
        print(f"{level}: {key}: {message}", file=sys.stderr)
        bad = bad or level == "error"
    return bad


def load_for_args(args):
    """Scenario text -> overridden, validated Scenario; None on error."""
    try:
        text = read_scenario_text(args.scenario)
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None
    sc, diags = parse_scenario(text)
    if getattr(args, "set", None):
        apply_overrides(sc, args.set, diags)
    if getattr(args, "seed", None) is not None:
        sc.sim.seed = args.seed
    if getattr(args, "backend", None):
        sc.sim.backend = args.backend
    if getattr(args, "until", None) is not None:
        if args.until <= 0:
            diags.append(("error", "--until", "must be positive"))
        sc.sim.horizon_s = min(sc.sim.horizon_s, args.until)
    diags.extend(validate(sc))
    if print_diags(diags):
        return None
    return sc


def cmd_run(args) -> int:
    sc = load_for_args(args)
    if sc is None:
        return 2
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "metrics.csv")
    cl = Cluster(sc, metrics_path=csv_path)
    cl.run()
    problems = cl.check_invariants()
    summary = cl.summary()
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(summary)
        for p in problems:
            fh.write(f"invariant violated: {p}\n")
    sys.stdout.write(summary)
    if problems:
        for p in problems:
            print(f"invariant violated: {p}", file=sys.stderr)
        return 3
    return 0


def cmd_validate(args) -> int:
    sc = load_for_args(args)
    if sc is None:
        return 2
    print("ok")
    return 0


def cmd_dump_state(args) -> int:
    sc = load_for_args(args)
    if sc is None:
        return 2
    cl = Cluster(sc)
    cl.run()
    problems = cl.check_invariants()
    sys.stdout.write(cl.dump_state())
    if problems:
        for p in problems:
            print(f"invariant violated: {p}", file=sys.stderr)
        return 3
    return 0


def cmd_report(args) -> int:
    from . import report
    try:
        written = report.render(args.csv, args.out)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fractalsim",
        description="Deterministic self-scaling service simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_flags(p, with_out=False):
        p.add_argument("--scenario", required=True,
                       help="scenario file path or bundled scenario name")
        p.add_argument("--seed", type=int, help="override sim.seed")
        p.add_argument("--backend", choices=("group", "learn"),
                       help="override the flow steering backend")
        p.add_argument("--until", type=float, metavar="SECONDS",
                       help="cap the run horizon")
        p.add_argument("--set", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override any scenario key (repeatable)")
        if with_out:
            p.add_argument("--out", default="out",
                           help="output directory (default: out)")

    p_run = sub.add_parser("run", help="run a scenario, write CSV and summary")
    scenario_flags(p_run, with_out=True)
    p_run.set_defaults(fn=cmd_run)

    p_val = sub.add_parser("validate", help="check a scenario and exit")
    p_val.add_argument("--scenario", required=True)
    p_val.add_argument("--set", action="append", default=[],
                       metavar="SECTION.KEY=VALUE")
    p_val.set_defaults(fn=cmd_validate)

    p_dump = sub.add_parser(
        "dump-state", help="run to a point and print store/flow/group dumps")
    scenario_flags(p_dump)
    p_dump.set_defaults(fn=cmd_dump_state)

    p_rep = sub.add_parser("report", help="render figures from a metrics CSV")
    p_rep.add_argument("--csv", required=True, help="metrics.csv from a run")
    p_rep.add_argument("--out", default=None,
                       help="figure directory (default: next to the CSV)")
    p_rep.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
