#!/usr/bin/env python3
"""
Command-line entry point.

    python cli.py simulate --out fixtures
    python cli.py run-all --config fixtures/demo_config.json --out out
    python cli.py fit --config cfg.json --strict

Exit codes: 0 ok, 1 other failure, 2 missing input, 3 validation, 4 non-convergence (fit with --strict).
"""
from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional

from config import load_config
from pipeline import STAGE_ORDER, run_all, run_stage
from shared import PipelineError, configure_log_file, log_event
from synthetic import generate_fixtures


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="port-resilience",
                                     description="Port disruption and recovery analytics for tropical cyclones.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="Master seed (overrides config)")
    common.add_argument("--threads", type=int, default=None, help="Worker cap; never changes results")
    common.add_argument("--out", type=str, default=None, help="Output directory")
    common.add_argument("--strict", action="store_true", help="Exit 4 when any fit fails to converge")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_ORDER:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("run-all", parents=[common], help="run every stage in order, stopping at the first failure")
    sim = sub.add_parser("simulate", parents=[common], help="write a synthetic fixture set")
    sim.add_argument("--days", type=int, default=540, help="Days of AIS history")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "simulate":
        out = args.out or "fixtures"
        try:
            paths = generate_fixtures(out, args.seed if args.seed is not None else 20240601, args.days)
        except (OSError, ValueError) as e:
            log_event("simulate_error", str(e), "cli")
            return PipelineError.exit_code
        print(f"fixtures written to {out}; run: python cli.py run-all --config {paths['config']}")
        return 0

    try:
        cfg = load_config(args.config, {"seed": args.seed, "threads": args.threads, "out_dir": args.out})
    except PipelineError as e:
        log_event("config_error", str(e), "cli")
        return e.exit_code
    configure_log_file(os.path.join(cfg.out_dir, "pipeline.log"))

    if args.command == "run-all":
        state = run_all(cfg, args.strict)
        if state["rc"] != 0:
            print(f"{state['current']} failed: {state['message']}", file=sys.stderr)
        return state["rc"]

    rc, message, _ = run_stage(args.command, cfg, args.strict)
    if rc != 0:
        print(f"{args.command} failed: {message}", file=sys.stderr)
    return rc


if __name__ == "__main__":
    sys.exit(main())
