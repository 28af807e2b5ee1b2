"""bandgap bands|effmass|homog|defect --config <file.toml> --out <dir>"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import BandgapError, NumericalError

COMMANDS = {
    "bands": pipeline.run_bands,
    "effmass": pipeline.run_effmass,
    "homog": pipeline.run_homog,
    "defect": pipeline.run_defect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bandgap", description="Band edges, effective masses and defect-mode bifurcations.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "bands": "band structure CSV and spectral gaps",
        "effmass": "effective-mass tensor by both routes",
        "homog": "homogenized eigenpairs",
        "defect": "expansion plus direct convergence study",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command](cfg, args.out)
    except BandgapError as exc:
        print(f"bandgap {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ArithmeticError, MemoryError) as exc:
        err = NumericalError(str(exc))
        print(f"bandgap {args.command}: numerical failure: {exc}", file=sys.stderr)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
