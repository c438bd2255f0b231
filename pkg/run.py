#!/usr/bin/env python3
"""
Command-line entry point.
Run with: python run.py loop --config scenarios/closed_loop.yaml --seed 7 --out out/loop
List and verify recorded runs: python run.py report --out out/loop
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

# Project root
ROOT = Path(__file__).resolve().parent
sys.path.insert(0, str(ROOT))

from config import load_config, load_settings
from errors import ConfigError, MoldpilotError
from ledger import ledger_path, list_runs, verify_artifacts
from runtime import run_scenario, self_test, verify_report

logger = logging.getLogger("run")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_SELF_TEST = 4

# subcommand -> scenario kinds it accepts
COMMANDS: dict[str, tuple[str, ...]] = {
    "screen": ("screen",),
    "train": ("train-forward", "train-inverse"),
    "tune": ("tune-topology",),
    "loop": ("closed-loop",),
    "regulate": ("regulate",),
    "spc-compare": ("spc-compare",),
}


def configure_logging(quiet: bool) -> None:
    settings = load_settings()
    level = logging.DEBUG if settings.debug else getattr(logging, settings.log_level.upper(), logging.INFO)
    if quiet:
        level = max(level, logging.WARNING)
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moldpilot", description="Injection-molding cycle-to-cycle quality control toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kinds in COMMANDS.items():
        p = sub.add_parser(name, help=f"run a {' or '.join(kinds)} scenario")
        p.add_argument("--config", required=True, type=Path, help="scenario YAML file")
        p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides the config)")
        p.add_argument("--quiet", action="store_true", help="log warnings and errors only")
        p.add_argument("--self-test", action="store_true", help="exit 4 when acceptance thresholds fail")
    p = sub.add_parser("report", help="list recorded runs and verify their artifacts")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory holding the ledger")
    p.add_argument("--quiet", action="store_true", help="log warnings and errors only")
    return parser


def _report(out: Path) -> int:
    ledger = ledger_path(out)
    runs = list_runs(ledger)
    if not runs:
        print(f"No runs recorded in {out}")
        return EXIT_OK
    failed = False
    for run in runs:
        checksums = verify_artifacts(ledger, run["id"])
        recomputed = []
        if run["status"] == "ok" and run["report_path"] and (out / run["report_path"]).exists():
            recomputed = verify_report(out / run["report_path"])
        bad = [p for p, ok in checksums if not ok] + [n for n, ok in recomputed if not ok]
        failed = failed or bool(bad)
        print(
            f"{run['id']:>4}  {run['recorded_at']}  {run['kind']:<14} seed={run['seed']:<20} {run['status']:<6} "
            f"artifacts={len(checksums)} traced={len(recomputed)} " + ("MISMATCH " + ", ".join(bad) if bad else "verified")
        )
    return EXIT_RUNTIME if failed else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.quiet)
    if args.command == "report":
        try:
            return _report(args.out)
        except MoldpilotError as e:
            logger.error("%s", e)
            return EXIT_RUNTIME
    try:
        overrides = {"seed": args.seed, "output_dir": None if args.out is None else str(args.out)}
        config = load_config(args.config, overrides)
        if config.kind not in COMMANDS[args.command]:
            raise ConfigError(f"config kind {config.kind!r} does not match subcommand {args.command!r}")
    except ConfigError as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    try:
        report = run_scenario(config)
    except MoldpilotError as e:
        logger.error("%s", e)
        return EXIT_RUNTIME
    print(json.dumps(report.results, indent=2, sort_keys=True, default=str))
    if args.self_test:
        checks = self_test(report)
        if not all(ok for _, ok in checks):
            return EXIT_SELF_TEST
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
