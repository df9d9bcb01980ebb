"""Command-line entry point for the MTLB amplifier toolkit."""
import argparse
import json
import logging
import sys
from typing import List, Optional

from config import Config
from runner import COMMANDS, MtlbRunner
from schemas import load_system
from tools.errors import MtlbError

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtlb",
        description="Dispersion, gain and field analysis of multi-line amplifiers driven by an electron beam.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--input", required=True, help="system file (JSON)")
    parser.add_argument("--output", default=None, help=f"output directory (default: {Config.OUTPUT_DIR})")
    parser.add_argument("--tol", type=float, default=None, help=f"relative root tolerance (default: {Config.ROOT_TOL})")
    parser.add_argument("--param", choices=("xi", "u0", "omega"), default="xi", help="sweep parameter")
    parser.add_argument("--from", dest="start", type=float, default=1e-6, help="sweep start")
    parser.add_argument("--to", dest="stop", type=float, default=1e-3, help="sweep end")
    parser.add_argument("--points", type=int, default=31, help="sweep points")
    parser.add_argument("--log", action="store_true", help="log-spaced sweep")
    return parser


def _emit_error(error: Exception, exit_code: int) -> int:
    payload = {"error": type(error).__name__, "message": str(error), "exit_code": exit_code}
    for attr in ("line", "column", "step"):
        if hasattr(error, attr):
            payload[attr] = getattr(error, attr)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return exit_code


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one command.

    Returns:
        0 on success, 1 for invalid input or configuration, 2 for numerical
        or I/O failures
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # usage errors are input errors
        return 0 if not e.code else 1

    try:
        Config.validate()
    except ValueError as e:
        return _emit_error(e, 1)

    # Configure logging
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )

    options = {}
    if args.command == "sweep":
        options = dict(param=args.param, start=args.start, stop=args.stop, points=args.points, log=args.log)

    try:
        system = load_system(args.input)
        runner = MtlbRunner(system, output_dir=args.output, tol=args.tol)
        paths = runner.run(args.command, **options)
    except MtlbError as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return _emit_error(e, e.exit_code)
    except Exception as e:
        # anything outside the error hierarchy is a numerical or internal failure
        logger.exception(f"{args.command} failed unexpectedly: {type(e).__name__}: {e}")
        return _emit_error(e, 2)

    for path in paths:
        print(path)
    logger.info(f"{args.command} finished, {len(paths)} files written")
    return 0


if __name__ == "__main__":
    sys.exit(main())
