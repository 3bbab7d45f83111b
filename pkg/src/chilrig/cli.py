"""Command-line interface.

Exit codes: 0 all criteria pass, 1 at least one criterion fails, 2 the
case is invalid or the run crashed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .report import DEFAULT_FORMATS, emit_report
from .testbench import (
    SCENARIOS,
    CaseParseError,
    ValidationError,
    demo_case,
    load_testcase,
    run_case_report,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chil-rig",
        description="deterministic controller-in-the-loop test rig",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a test case and emit its report")
    run_p.add_argument("case", help="path to a case JSON file")
    run_p.add_argument("--out", default="out", help="output directory")
    run_p.add_argument(
        "--realtime", action="store_true", help="pace the run against the wall clock"
    )
    run_p.add_argument(
        "--controller",
        metavar="tcp:HOST:PORT",
        help="bind an external controller at this endpoint "
        "(CHIL_ENDPOINT overrides)",
    )
    run_p.add_argument(
        "--delay",
        type=float,
        default=None,
        metavar="SECONDS",
        help="override the measurement-path communication delay",
    )
    run_p.add_argument(
        "--format",
        default=",".join(DEFAULT_FORMATS),
        help="comma-separated artifact formats (json,csv,txt,png)",
    )

    val_p = sub.add_parser("validate", help="check a case file and exit")
    val_p.add_argument("case", help="path to a case JSON file")

    demo_p = sub.add_parser("demo", help="emit a shipped example case file")
    demo_p.add_argument("scenario", choices=SCENARIOS)
    demo_p.add_argument("--out", default=".", help="directory for the case file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            load_testcase(args.case)
            print(f"{args.case}: ok")
            return 0
        if args.command == "demo":
            doc = demo_case(args.scenario)
            path = Path(args.out) / f"demo-{args.scenario}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
            print(path)
            return 0
        return _run(args)
    except (CaseParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _run(args) -> int:
    case = load_testcase(args.case)
    controller_override = "external" if args.controller else None
    report = run_case_report(
        case,
        delay_override=args.delay,
        controller_override=controller_override,
        endpoint_override=args.controller,
        realtime=args.realtime,
    )
    formats = tuple(x.strip() for x in args.format.split(",") if x.strip())
    out_dir = Path(args.out) / case.name
    paths = emit_report(report, formats=formats, out_dir=out_dir)
    for c in report.criteria:
        print(f"{'PASS' if c['pass'] else 'FAIL'}  {c['description']}")
    if report.error:
        print(f"error: {report.error}", file=sys.stderr)
        print(f"report: {out_dir}")
        return 2
    print(f"overall: {'PASS' if report.passed else 'FAIL'}")
    print(f"report: {out_dir} ({len(paths)} files)")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
