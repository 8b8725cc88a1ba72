"""Command-line front end.

    origami run --scenario FILE [--seed N] [--trace-out PATH] [--report text|machine] [--max-rounds N]
    origami check --scenario FILE
    origami list

Exit codes: 0 when every assertion and audit passes, 1 when any fails, 2 when
the scenario file does not parse. ``ORIGAMI_SEED`` overrides the scenario
seed and ``ORIGAMI_TRACE_DIR`` picks a directory for traces when
``--trace-out`` is not given.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ScenarioError
from .report import build_report
from .scenario import bundled_scenarios, load_scenario
from .simnet import run_scenario

EXIT_OK, EXIT_FAILED, EXIT_BAD_INPUT = 0, 1, 2


def _resolve(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    for cand in bundled_scenarios():
        if cand.stem == path or cand.name == path:
            return cand
    return p


def _print_problems(err: ScenarioError):
    print(f"error: {err}", file=sys.stderr)
    for line in err.problems:
        print(f"  - {line}", file=sys.stderr)


def _env_int(name: str):
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ScenarioError(f"{name} must be an integer", [f"{name}={raw!r}"]) from None


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(_resolve(args.scenario))
        seed = args.seed if args.seed is not None else _env_int("ORIGAMI_SEED")
    except ScenarioError as err:
        _print_problems(err)
        return EXIT_BAD_INPUT
    trace_out = args.trace_out
    if trace_out is None and os.environ.get("ORIGAMI_TRACE_DIR"):
        folder = Path(os.environ["ORIGAMI_TRACE_DIR"])
        folder.mkdir(parents=True, exist_ok=True)
        trace_out = folder / f"{scenario.name}.ndjson"
    result = run_scenario(scenario, seed=seed, max_rounds=args.max_rounds, workers=args.workers,
                          trace_out=trace_out)
    report = build_report(result)
    print(report.to_json() if args.report == "machine" else report.to_text())
    return result.exit_code


def cmd_check(args) -> int:
    try:
        scenario = load_scenario(_resolve(args.scenario))
    except ScenarioError as err:
        _print_problems(err)
        return EXIT_BAD_INPUT
    print(f"ok: {scenario.name} ({len(scenario.parties)} parties, {len(scenario.timeline)} timeline entries)")
    return EXIT_OK


def cmd_list(args) -> int:
    for path in bundled_scenarios():
        try:
            s = load_scenario(path)
            print(f"{path.stem:<28} {s.description}")
        except ScenarioError as err:
            print(f"{path.stem:<28} INVALID: {err}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="origami", description="Run and check Origami channel scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and report")
    run.add_argument("--scenario", required=True, help="scenario file, or the name of a bundled scenario")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--trace-out", default=None, help="write the NDJSON trace here")
    run.add_argument("--report", choices=("text", "machine"), default="text")
    run.add_argument("--max-rounds", type=int, default=None)
    run.add_argument("--workers", type=int, default=1, help="step parties on this many threads")
    run.set_defaults(func=cmd_run)

    check = sub.add_parser("check", help="validate a scenario file without running it")
    check.add_argument("--scenario", required=True)
    check.set_defaults(func=cmd_check)

    lst = sub.add_parser("list", help="list bundled scenarios")
    lst.set_defaults(func=cmd_list)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
