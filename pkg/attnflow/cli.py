import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from attnflow import __version__
from attnflow.config import Experiment, ExperimentConfig, load_config
from attnflow.errors import AttnFlowError, ConfigError
from attnflow.experiments import RUNNERS
from attnflow.measures import Status
from attnflow.validation import render_report, run_validation_suite


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_NUMERICAL_FAILURE = 2
EXIT_VALIDATION_FAILURE = 3

SUBCOMMANDS = {
    "cone2d": Experiment.CONE2D,
    "rank-hist": Experiment.RANK_HIST,
    "meanfield": Experiment.MEANFIELD,
    "validate": Experiment.VALIDATE,
    "run": Experiment.RUN,
}


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="attnflow", description="Simulate attention dynamics of token measures.")
    parser.add_argument("--version", action="version", version=f"attnflow {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for name, experiment in SUBCOMMANDS.items():
        sub = subparsers.add_parser(name, help=f"run the {experiment.value} experiment")
        sub.add_argument(
            "--config", type=Path, required=experiment != Experiment.VALIDATE,
            help="JSON experiment configuration"
        )
        sub.add_argument("--seed", type=int, help="overrides the configuration's seed")
        sub.add_argument("--out", type=str, help="output directory")
        sub.add_argument("--threads", type=int, help="worker processes for sweeps")
        sub.add_argument("--rank-tol", type=float, help="relative eigenvalue threshold of limiting ranks")
        sub.add_argument("-v", "--verbose", action="store_true", help="log solver details")
        if experiment == Experiment.VALIDATE:
            sub.add_argument("--full", action="store_true", default=None, help="run the checks at full size")

    return parser.parse_args(argv)


def _load(args: argparse.Namespace) -> ExperimentConfig:
    experiment = SUBCOMMANDS[args.command]
    overrides = {
        "experiment": experiment.value,
        "seed": args.seed,
        "out": args.out,
        "threads": args.threads,
        "rank_tol": args.rank_tol,
        "full": getattr(args, "full", None),
    }
    if args.config is not None:
        return load_config(args.config, **overrides)
    return ExperimentConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def _validate(config: ExperimentConfig) -> int:
    report = run_validation_suite(config.full, config.seed, config.threads, Path(config.out))
    print(render_report(report))
    return EXIT_OK if report.passed else EXIT_VALIDATION_FAILURE


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level="DEBUG" if args.verbose else "INFO", stream=sys.stdout)

    try:
        config = _load(args)
        logger.info(f"attnflow {__version__}: {config.experiment.value} with seed {config.seed}, writing to {config.out}")
        if config.experiment == Experiment.VALIDATE:
            return _validate(config)
        result = RUNNERS[config.experiment](config)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except (AttnFlowError, RuntimeError) as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL_FAILURE

    if config.experiment == Experiment.RUN and result.status == Status.NUMERICAL_FAILURE:
        logger.error(f"The trajectory failed at t={result.t_star}: {result.error}")
        return EXIT_NUMERICAL_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
