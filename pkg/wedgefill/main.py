import argparse
import logging
import sys
from typing import List, Optional

from wedgefill.commands import config_command, dataset_command, eval_command, infer_command, train_command
from wedgefill.core.config import settings
from wedgefill.core.errors import WedgefillError

logger = logging.getLogger(__name__)

# Order matters for --help only
COMMANDS = [dataset_command, train_command, infer_command, eval_command, config_command]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wedgefill",
        description="Limited-angle sinogram inpainting: dataset synthesis, staged training, inference and evaluation",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit code"""
    logging.basicConfig(
        level=getattr(logging, settings.WEDGEFILL_LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except WedgefillError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
