"""
Command-line surface of the phi4-lsi toolkit.

    phi4-lsi <covariance|counterterms|sample|chi-profile|lsi-bound|verify>
             [--config PATH] [--out DIR] [--workers N] [--seed U64] [--log-level LEVEL]

Exit codes: 0 success, 1 configuration or validation error, 2 I/O error,
3 inequality violation (verify), 4 any other runtime failure.
"""

import argparse
import json
import os
import sys
from typing import Callable, Dict, List, Optional, Tuple

import structlog

from app.commands import (
    cmd_chi_profile,
    cmd_counterterms,
    cmd_covariance,
    cmd_lsi_bound,
    cmd_sample,
    cmd_verify,
)
from app.config import RunConfig, config, load_run_config
from app.errors import ConfigurationError, InequalityViolation
from app.utils import format_error_response, setup_logging


EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_VIOLATION = 3
EXIT_RUNTIME = 4

# (function, takes a worker count)
COMMANDS: Dict[str, Tuple[Callable[..., dict], bool]] = {
    "covariance": (cmd_covariance, False),
    "counterterms": (cmd_counterterms, False),
    "sample": (cmd_sample, True),
    "chi-profile": (cmd_chi_profile, True),
    "lsi-bound": (cmd_lsi_bound, True),
    "verify": (cmd_verify, False),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Run configuration (JSON)")
    common.add_argument("--out", default=None, help="Output directory (overrides config)")
    common.add_argument("--workers", type=int, default=None, help="Worker processes (overrides PHI4_LSI_WORKERS)")
    common.add_argument("--seed", type=int, default=None, help="Master seed (overrides sampler.seed)")
    common.add_argument(
        "--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Log level (overrides config)"
    )

    parser = argparse.ArgumentParser(prog="phi4-lsi", description="Log-Sobolev bounds for lattice phi^4 models")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("covariance", parents=[common], help="Free-field kernel C_t and its moments")
    sub.add_parser("counterterms", parents=[common], help="Mass counterterm sweep and bound-shape fits")
    sub.add_parser("sample", parents=[common], help="Markov chains, correlation, chi and skeleton-bound slack")
    sub.add_parser("chi-profile", parents=[common], help="Susceptibility profile over the scale grid")
    sub.add_parser("lsi-bound", parents=[common], help="Criterion lower bound on the log-Sobolev constant")
    sub.add_parser("verify", parents=[common], help="Exact small-lattice falsification suite")
    return parser


def resolve_run(args: argparse.Namespace, logger) -> Tuple[RunConfig, int]:
    """
    Apply CLI overrides to the run configuration.

    Priority: command line > config file > environment > defaults.

    Returns:
        (resolved configuration, worker count)
    """
    run = load_run_config(args.config)

    if args.out is not None:
        directory, source = args.out, "command_line"
    elif "directory" in run.output.model_fields_set:
        directory, source = run.output.directory, "config_file"
    elif config.runtime.output_dir:
        directory, source = config.runtime.output_dir, "environment"
    else:
        directory, source = run.output.directory, "default"
    run = run.model_copy(update={"output": run.output.model_copy(update={"directory": directory})})
    logger.info("Using output directory", directory=directory, source=source)

    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigurationError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        run = run.model_copy(update={"sampler": run.sampler.model_copy(update={"seed": args.seed})})
        logger.info("Using seed from command line", seed=args.seed, source="command_line")
    else:
        logger.info("Using seed from configuration", seed=run.sampler.seed, source="config_file")

    if args.workers is not None:
        if args.workers < 1:
            raise ConfigurationError(f"--workers must be a positive integer, got {args.workers}")
        workers, source = args.workers, "command_line"
    else:
        workers = config.runtime.workers
        source = "environment" if os.getenv("PHI4_LSI_WORKERS") else "default"
    logger.info("Using worker count", workers=workers, source=source)
    return run, workers


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one pipeline and map failures onto exit codes."""
    args = build_parser().parse_args(argv)

    log_level = args.log_level if args.log_level is not None else config.runtime.log_level
    setup_logging(log_level)
    logger = structlog.get_logger(__name__)

    try:
        config.validate()
        run, workers = resolve_run(args, logger)
        command, parallel = COMMANDS[args.command]
        logger.info("Running command", command=args.command)
        manifest = command(run, workers) if parallel else command(run)
        print(json.dumps({"command": args.command, "digest": manifest["digest"]}))
        return EXIT_OK
    except InequalityViolation as e:
        code = EXIT_VIOLATION
        error = e
    except ValueError as e:
        code = EXIT_CONFIG
        error = e
    except OSError as e:
        code = EXIT_IO
        error = e
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_RUNTIME
    except Exception as e:
        code = EXIT_RUNTIME
        error = e

    logger.error("Command failed", command=args.command, error=str(error), error_type=type(error).__name__)
    print(json.dumps(format_error_response(error, {"command": args.command, "exit_code": code})), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
