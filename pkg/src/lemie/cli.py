"""
Command-line entry point.

    lemie run configs/beta_single_success.json --out-dir results
    lemie sweep configs/beta_sweep.json --methods naive,mie2
    lemie truth configs/mvn_figure.json
    lemie diagnose results/beta_single_success/weights_mie2.csv

Exit codes: 0 on success, 2 when any method produced a failed row, 3 on a
configuration error.
"""

import argparse
import json
import logging
import sys
from typing import List, Optional, Sequence

from .diagnostics import diagnose
from .errors import ConfigError, LemieError
from .experiments import ScenarioConfig, run_scenario, sweep, truth_summary
from .settings import RuntimeSettings, load_settings
from .storage import read_weighted

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED_ROWS = 2
EXIT_CONFIG = 3


def _csv_list(raw: str) -> List[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lemie",
        description="Multiple importance estimators for partitioned-data Bayesian inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_command(name: str, help_text: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("config", help="scenario config (JSON)")
        cmd.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        cmd.add_argument("--out-dir", default=None, help="output directory (default: LEMIE_OUT_DIR)")
        cmd.add_argument("--chunk-size", type=int, default=None, help="pooled draws per likelihood chunk")
        return cmd

    for name, help_text in (("run", "run one scenario"), ("sweep", "run a scenario over its M/N grid")):
        cmd = scenario_command(name, help_text)
        cmd.add_argument("--methods", type=_csv_list, default=None, help="comma-separated methods")
        cmd.add_argument(
            "--laplace-types", type=_csv_list, default=None, help="comma-separated Laplace types (1,2,3)"
        )

    scenario_command("truth", "write reference draws and their summary")

    diag = sub.add_parser("diagnose", help="ESS and k-hat of a weighted-sample CSV")
    diag.add_argument("weights", help="weighted-sample CSV")
    diag.add_argument("--tail-size", type=int, default=None, help="largest weights in the Pareto fit")
    return parser


def load_config(args: argparse.Namespace) -> ScenarioConfig:
    """Read the scenario file and apply command-line overrides."""
    config = ScenarioConfig.from_file(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "methods", None):
        overrides["methods"] = args.methods
    if getattr(args, "laplace_types", None):
        try:
            types = [int(t) for t in args.laplace_types]
        except ValueError as e:
            raise ConfigError(f"Laplace types must be integers: {args.laplace_types}") from e
        overrides["laplace"] = {**config.laplace.model_dump(), "types": types}
    if not overrides:
        return config
    try:
        return ScenarioConfig.model_validate({**config.model_dump(), **overrides})
    except ValueError as e:
        raise ConfigError(f"invalid override: {e}") from e


def _settings(args: argparse.Namespace) -> RuntimeSettings:
    settings = load_settings()
    if getattr(args, "chunk_size", None) is not None:
        if args.chunk_size < 1:
            raise ConfigError(f"--chunk-size must be >= 1, got {args.chunk_size}")
        settings.chunk_size = args.chunk_size
    if getattr(args, "out_dir", None):
        settings.out_dir = args.out_dir
    return settings


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = _settings(args)
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CONFIG
    _configure_logging(settings.log_level)

    try:
        if args.command == "diagnose":
            report = diagnose(read_weighted(args.weights), args.tail_size)
            print(json.dumps(report.as_dict(), indent=2))
            return EXIT_OK

        config = load_config(args)
        if args.command == "truth":
            print(json.dumps(truth_summary(config, settings.out_dir), indent=2))
            return EXIT_OK
        if args.command == "run":
            outcome = run_scenario(config, settings.out_dir, settings)
        else:
            outcome = sweep(config, settings.out_dir, settings)
    except ConfigError as e:
        logger.error(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except (LemieError, OSError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return EXIT_FAILED_ROWS

    if outcome.failed:
        logger.warning(f"⚠️  {len(outcome.failed)} method(s) failed; see {outcome.out_dir / 'results.csv'}")
        return EXIT_FAILED_ROWS
    logger.info(f"📊 Results in {outcome.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
