import argparse
import logging

from wedgefill.commands.options import add_run_options, open_run
from wedgefill.pipeline.stages import PipelineRunner

logger = logging.getLogger(__name__)


class DatasetCommand:
    """gen-dataset: phantoms (or imported slices), full sinograms and scenario masks"""

    name = "gen-dataset"

    def register(self, subparsers) -> argparse.ArgumentParser:
        parser = subparsers.add_parser(self.name, help="synthesize the train/test dataset")
        add_run_options(parser)
        parser.set_defaults(handler=self.run)
        return parser

    def run(self, args: argparse.Namespace) -> int:
        config, store = open_run(args)
        dataset = PipelineRunner(config, store).generate_dataset(args.seed)
        logger.info(
            f"Wrote {len(dataset.train_images)} train / {len(dataset.test_images)} test phantoms "
            f"to {store.dataset_path}"
        )
        return 0


# Global instance
dataset_command = DatasetCommand()
