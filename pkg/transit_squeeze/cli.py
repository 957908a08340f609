"""`simulate` command line: spectrum, squeezing, calibrate and summarize"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

from transit_squeeze._exceptions import (
    ConfigError,
    ConfigValidationError,
    InvalidParameterError,
    NumericalError,
    OutputMismatchError,
)
from transit_squeeze._paths import list_profiles
from transit_squeeze.commands import (
    RunOptions,
    cmd_calibrate,
    cmd_spectrum,
    cmd_squeezing,
    cmd_summarize,
)
from transit_squeeze.config import (
    RunConfig,
    apply_overrides,
    load_config,
    load_profile,
    parse_sweep,
    with_sweeps,
)

logger: logging.Logger = logging.getLogger(__name__)

EXIT_OK: int = 0
EXIT_CONFIG: int = 2
EXIT_NUMERICAL: int = 3

ENV_SEED: str = "SIM_SEED"
ENV_WORKERS: str = "SIM_WORKERS"


def _env_int(name: str) -> int | None:
    raw: str | None = os.environ.get(name)
    if raw is None or not raw.strip():
        return None
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigValidationError(name, f"expected an integer, got {raw!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser: argparse.ArgumentParser = argparse.ArgumentParser(
        prog="simulate",
        description="Monte Carlo simulation of transit noise and conditional spin squeezing in a coated vapor cell.",
    )
    common: argparse.ArgumentParser = argparse.ArgumentParser(add_help=False)
    source = common.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", type=Path, help="path to a run config")
    source.add_argument(
        "--profile",
        help=f"bundled reproduction profile, one of: {', '.join(list_profiles())}",
    )
    common.add_argument(
        "--sweep",
        action="append",
        default=[],
        metavar="AXIS=V1,V2,...",
        help="sweep an axis (beam_diameter, larmor, kappa, beam_shape, n_averages); replaces the config's sweep of that axis",
    )
    common.add_argument("--seed", type=int, default=None, help=f"master seed (overrides ${ENV_SEED} and the config)")
    common.add_argument(
        "--workers", type=int, default=None, help=f"worker processes (overrides ${ENV_WORKERS}, default 1)"
    )
    common.add_argument("--out", type=Path, default=None, help="output directory (defaults to output.dir)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="warnings only, no progress bars")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("spectrum", parents=[common], help="averaged lock-in spectra per sweep point")
    commands.add_parser("squeezing", parents=[common], help="conditional squeezing per sweep point")
    commands.add_parser("calibrate", parents=[common], help="tune the wall reset probability to a target kappa^2 T2")
    commands.add_parser("summarize", parents=[common], help="re-analyse spectra written by `spectrum`")
    return parser


def resolve_run(args: argparse.Namespace) -> tuple[RunConfig, RunOptions]:
    """config and run options with precedence flag > environment > file"""
    cfg: RunConfig = load_config(args.config) if args.config is not None else load_profile(args.profile)
    if args.sweep:
        cfg = with_sweeps(cfg, [parse_sweep(text, cfg) for text in args.sweep])

    seed: int | None = args.seed if args.seed is not None else _env_int(ENV_SEED)
    if seed is not None:
        cfg = apply_overrides(cfg, {"seed": seed})
    env_workers: int | None = _env_int(ENV_WORKERS)
    workers: int = args.workers if args.workers is not None else env_workers if env_workers is not None else 1
    if workers < 1:
        raise ConfigValidationError("workers", f"must be at least 1, got {workers}")

    return cfg, RunOptions(
        seed=cfg.seed,
        workers=workers,
        out_dir=args.out if args.out is not None else Path(cfg.output.dir),
        progress=not args.quiet,
    )


_COMMANDS: dict[str, Callable[[RunConfig, RunOptions], object]] = {
    "spectrum": cmd_spectrum,
    "squeezing": cmd_squeezing,
    "calibrate": cmd_calibrate,
    "summarize": cmd_summarize,
}


def main(argv: Sequence[str] | None = None) -> int:
    args: argparse.Namespace = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    try:
        cfg, opts = resolve_run(args)
        logger.info(f"{args.command}: seed {opts.seed}, {opts.workers} worker(s), writing to {opts.out_dir}")
        result: object = _COMMANDS[args.command](cfg, opts)
    except (ConfigError, InvalidParameterError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, OutputMismatchError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    logger.info(f"done: {result}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
