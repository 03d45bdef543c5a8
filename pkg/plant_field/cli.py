"""Command-line entry point."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import TYPE_CHECKING

import colorlog

from .config import PipelineConfig
from .const import _LOGGER, DOMAIN, EXIT_CONFIG_ERROR, EXIT_OK, EXIT_STAGE_FAILURE
from .coordinator import PipelineCoordinator
from .exceptions import ConfigError, ManifestError, StageError
from .stages import STAGE_DESCRIPTIONS

if TYPE_CHECKING:
    from collections.abc import Sequence

COMMAND_PIPELINE = "pipeline"
LOG_FORMAT = "%(log_color)s%(asctime)s %(levelname)-8s %(name)s: %(message)s"


def setup_logging(verbose: bool = False) -> None:
    """Attach a colored stream handler to the package logger."""
    handler = colorlog.StreamHandler()
    handler.setFormatter(
        colorlog.ColoredFormatter(
            LOG_FORMAT,
            datefmt="%H:%M:%S",
            log_colors={
                "DEBUG": "cyan",
                "INFO": "green",
                "WARNING": "yellow",
                "ERROR": "red",
                "CRITICAL": "bold_red",
            },
        )
    )
    logger = logging.getLogger(DOMAIN)
    logger.handlers = [handler]
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--workers", type=int, help="worker threads (1 is reproducible)")
    common.add_argument("--out", type=Path, help="run directory (default runs/<name>)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="plant-field", description="Plant organ instance segmentation through a joint field."
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for stage in STAGE_DESCRIPTIONS:
        commands.add_parser(stage.key, parents=[common], help=f"run the {stage.key} stage")
    commands.add_parser(COMMAND_PIPELINE, parents=[common], help="run every enabled stage")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run a command and return the exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        config = PipelineConfig.load(args.config).with_overrides(args.seed, args.workers)
    except ConfigError as exception:
        _LOGGER.error(exception)
        return EXIT_CONFIG_ERROR
    root = args.out or Path("runs") / config.slug
    try:
        coordinator = PipelineCoordinator(config, root)
    except (ManifestError, OSError) as exception:
        _LOGGER.error("Cannot open run directory %s: %s", root, exception)
        return EXIT_STAGE_FAILURE
    try:
        if args.command == COMMAND_PIPELINE:
            coordinator.run_pipeline()
        else:
            coordinator.run_stage(args.command)
    except StageError as exception:
        _LOGGER.error("%s (partial outputs kept in %s)", exception, root)
        return EXIT_STAGE_FAILURE
    return EXIT_OK
