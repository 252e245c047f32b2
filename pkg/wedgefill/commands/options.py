import argparse
import logging
from typing import Tuple

from wedgefill.core.config import RunConfig, load_config, settings
from wedgefill.core.tensor_store import ArtifactStore, get_store

logger = logging.getLogger(__name__)


def add_run_options(parser: argparse.ArgumentParser, with_seed: bool = True) -> None:
    """--config / --out / --seed shared by every subcommand that touches a run directory"""
    parser.add_argument("--config", default=None, help="run configuration file (defaults for every key if omitted)")
    parser.add_argument("--out", default=settings.WEDGEFILL_RUN_DIR,
                        help=f"run directory (default {settings.WEDGEFILL_RUN_DIR}, env WEDGEFILL_RUN_DIR)")
    if with_seed:
        parser.add_argument("--seed", type=int, default=None, help="override the configured seed of this command")


def add_hash_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--ignore-config-hash", action="store_true",
                        help="use artifacts produced under a different configuration (warns instead of failing)")


def open_run(args: argparse.Namespace) -> Tuple[RunConfig, ArtifactStore]:
    """Load the configuration and the run directory named on the command line"""
    config = load_config(args.config)
    store = get_store(args.out)
    logger.info(f"Run directory {store.run_dir}, config hash {config.config_hash}")
    return config, store
