# main.py - command-line entry point
import argparse
import logging
import os
import sys

from controller import run
from core import __version__
from core.dichotomy import (DEFAULT_GAP_FACTOR, DEFAULT_K_CAP, DEFAULT_LAMBDA_MIN,
                            DEFAULT_WINDOW)
from core.errors import EXIT_VALIDATION, MudichoError
from core.evolution import DEFAULT_COND_CAP, DEFAULT_RK4_STEP
from core.linearize import DEFAULT_TAIL_EPS
from core.spectrum import DEFAULT_DTAU, DEFAULT_REFINE, DEFAULT_TAU_MAX, DEFAULT_TAU_MIN
from export.report_exporter import render_json
from session import CHECKS, COMMANDS, RunConfig

LOG_LEVEL_ENV = "MUDICHO_LOG_LEVEL"

COMMAND_HELP = {
    "dichotomy": "certify a strong mu-dichotomy and report K, lambda, a",
    "spectrum": "estimate the strong mu-dichotomy spectrum by a tau scan",
    "rescale": "anchor table and step matrices of the time-rescaled system",
    "linearize": "build the linearizing conjugacy and report residuals and regularity",
    "verify": "run one named consistency check",
    "flow": "transfer matrices, nonlinear flow and discretization of a continuous system",
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("spec", help="system-spec JSON file")
    parser.add_argument("--window", type=int, default=DEFAULT_WINDOW, help="largest index used (default %(default)s)")
    parser.add_argument("--tau-min", type=float, default=DEFAULT_TAU_MIN)
    parser.add_argument("--tau-max", type=float, default=DEFAULT_TAU_MAX)
    parser.add_argument("--dtau", type=float, default=DEFAULT_DTAU)
    parser.add_argument("--refine", type=float, default=DEFAULT_REFINE, help="bisection tolerance for endpoints")
    parser.add_argument("--tol", type=float, default=1e-6, help="acceptance tolerance for residual checks")
    parser.add_argument("--radius", type=float, default=0.5, help="sampling ball radius")
    parser.add_argument("--points-per-axis", type=int, default=9)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--samples", type=int, default=500, help="seeded (k, x) samples for residual tables")
    parser.add_argument("--output", choices=("json", "csv"), default="json")
    parser.add_argument("--out", default=None, help="report path (stdout when omitted)")
    parser.add_argument("--parallel", type=int, default=None, help="worker threads for tau scans")
    parser.add_argument("--rate", choices=("exponential", "polynomial", "logarithmic"), default=None,
                        help="override the growth rate of the spec")
    parser.add_argument("--c", type=float, default=None, help="override constant c")
    parser.add_argument("--eta", type=float, default=None, help="override constant eta")
    parser.add_argument("--const", action="append", metavar="NAME=VALUE", help="override any constant")
    parser.add_argument("--qr-accumulate", action="store_true", help="QR-stabilized products for pair tables")
    parser.add_argument("--tail-eps", type=float, default=DEFAULT_TAIL_EPS)
    parser.add_argument("--k-max", type=int, default=None, help="last source index of the conjugacy (default 10*window)")
    parser.add_argument("--step", type=float, default=DEFAULT_RK4_STEP, help="RK4 step size")
    parser.add_argument("--lambda-min", type=float, default=DEFAULT_LAMBDA_MIN)
    parser.add_argument("--k-cap", type=float, default=DEFAULT_K_CAP)
    parser.add_argument("--gap-factor", type=float, default=DEFAULT_GAP_FACTOR)
    parser.add_argument("--cond-cap", type=float, default=DEFAULT_COND_CAP)
    parser.add_argument("--log-level", default=None, help="logging level (default from MUDICHO_LOG_LEVEL or WARNING)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mudicho", description="Strong mu-dichotomies, spectra and linearization")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        child = sub.add_parser(command, help=COMMAND_HELP[command])
        _add_common(child)
        if command == "verify":
            child.add_argument("--check", choices=CHECKS, required=True)
        if command == "flow":
            child.add_argument("--times", default=None, help="time pairs 't,s;t,s'")
    return parser


def configure_logging(level: str = None) -> None:
    name = (level or os.getenv(LOG_LEVEL_ENV) or "WARNING").upper()
    logging.basicConfig(level=getattr(logging, name, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    try:
        config = RunConfig.from_args(args)
    except MudichoError as e:
        sys.stdout.write(render_json(e.to_dict()))
        return EXIT_VALIDATION
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
