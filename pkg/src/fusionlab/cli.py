"""Command line interface.

Exit codes: 0 on success, 2 for configuration problems, 3 when training
diverges (non-finite loss).
"""

import argparse
import sys

from .config import ConfigError, load_config, validate_file
from .experiments import run_experiment
from .tensor import DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _seed_list(text: str) -> list:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionlab",
        description="Run unsupervised meta-learning and continual-learning experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment from a JSON config")
    run_p.add_argument("config", help="path to the config file")
    run_p.add_argument(
        "--seed-override",
        type=_seed_list,
        default=None,
        metavar="S1,S2,...",
        help="replace the config's seed list",
    )
    run_p.add_argument("--out-dir", default=None, help="replace the config's output directory")

    val_p = sub.add_parser("validate", help="check a config file and list any issues")
    val_p.add_argument("config", help="path to the config file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "validate":
        issues = validate_file(args.config)
        if issues:
            for line in issues:
                print(line, file=sys.stderr)
            return EXIT_CONFIG
        print("ok")
        return EXIT_OK

    try:
        cfg = load_config(args.config)
    except ConfigError as err:
        print(err, file=sys.stderr)
        return EXIT_CONFIG
    try:
        out_dir = run_experiment(
            cfg, seed_override=args.seed_override, out_dir_override=args.out_dir
        )
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    print(out_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
