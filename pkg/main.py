#!/usr/bin/env python3
"""
Gaussian Transport Lab - Main CLI runner
"""
import argparse
import asyncio
import logging
import sys

from common.errors import ReportWriteError, ScenarioValidationError
from common.models import ReportFormat
from common.utils import setup_logging
from config import LOG_JSON, LOG_LEVEL, MAX_CONCURRENT_SCENARIOS, REPORT_DIR, REPORT_FORMAT, check_env_vars
from runner.pipeline import exit_status, run_scenarios
from runner.report import emit_report
from runner.scenario import parse_scenario

logger = logging.getLogger(__name__)

EXIT_CONFIG_ERROR = 2


def parse_args(argv=None):
    """Parse command-line arguments"""
    parser = argparse.ArgumentParser(
        description="Gaussian Transport Lab - numerical checks of optimal transport on Gaussian spaces"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    run_parser = subparsers.add_parser("run", help="Run one or more scenario files")
    run_parser.add_argument(
        "scenarios",
        nargs="+",
        help="Scenario files (key = value per line)"
    )

    # Output options
    run_parser.add_argument(
        "--report-dir",
        default=REPORT_DIR,
        help=f"Directory for the report file (default: {REPORT_DIR})"
    )
    run_parser.add_argument(
        "--format",
        choices=[f.value for f in ReportFormat],
        default=REPORT_FORMAT,
        help=f"Report format (default: {REPORT_FORMAT})"
    )
    run_parser.add_argument(
        "--timings",
        action="store_true",
        help="Include per-check wall time in the report"
    )

    # Execution options
    run_parser.add_argument(
        "--parallel",
        action="store_true",
        help="Run independent scenarios concurrently"
    )
    run_parser.add_argument(
        "--concurrency",
        type=int,
        default=MAX_CONCURRENT_SCENARIOS,
        help=f"Maximum concurrent scenarios with --parallel (default: {MAX_CONCURRENT_SCENARIOS})"
    )
    run_parser.add_argument(
        "--seed-override",
        type=int,
        help="Replace every scenario's seed"
    )

    # Logging options
    run_parser.add_argument(
        "--debug",
        action="store_true",
        help="Enable debug logging"
    )
    run_parser.add_argument(
        "--log-json",
        action="store_true",
        default=LOG_JSON,
        help="Emit logs as JSON lines"
    )

    return parser.parse_args(argv)


def load_scenarios(paths):
    """Parse every file, collecting validation errors across all of them."""
    scenarios, failures = [], []
    for path in paths:
        try:
            scenarios.append(parse_scenario(path))
        except ScenarioValidationError as e:
            for error in e.errors:
                logger.error(f"{e.path}: {error}")
            failures.append(e)
        except FileNotFoundError as e:
            logger.error(str(e))
            failures.append(e)
    return scenarios, failures


async def run_command(args) -> int:
    scenarios, failures = load_scenarios(args.scenarios)
    if failures:
        logger.error(f"{len(failures)} scenario file(s) failed validation; nothing was run")
        return EXIT_CONFIG_ERROR
    if args.seed_override is not None and not 0 <= args.seed_override < 2 ** 64:
        logger.error(f"Seed override must lie in [0, 2^64): {args.seed_override}")
        return EXIT_CONFIG_ERROR

    records = await run_scenarios(scenarios, parallel=args.parallel, max_concurrency=args.concurrency,
                                  seed_override=args.seed_override)
    try:
        path = emit_report(records, ReportFormat(args.format), args.report_dir, timings=args.timings)
    except ReportWriteError as e:
        logger.error(str(e))
        return EXIT_CONFIG_ERROR

    passed = sum(r.status == "pass" for r in records)
    failed = sum(r.status == "fail" for r in records)
    skipped = len(records) - passed - failed
    logger.info("\n===== LAB RESULTS =====")
    logger.info(f"Scenarios run: {len(scenarios)}")
    logger.info(f"Checks passed: {passed}, failed: {failed}, skipped: {skipped}")
    logger.info(f"Report: {path}")
    return exit_status(records)


async def main(argv=None) -> int:
    args = parse_args(argv)

    # Setup logging
    log_level = logging.DEBUG if args.debug else getattr(logging, LOG_LEVEL, logging.INFO)
    log_file = setup_logging(log_level, json_format=args.log_json)
    logger.info(f"Log file: {log_file}")
    if not check_env_vars():
        logger.warning("Some environment overrides were ignored")

    return await run_command(args)


def cli():
    sys.exit(asyncio.run(main()))


if __name__ == "__main__":
    cli()
