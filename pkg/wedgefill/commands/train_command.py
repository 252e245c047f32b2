import argparse
import logging

from wedgefill.commands.options import add_run_options, open_run
from wedgefill.core.tensor_store import ArtifactStore
from wedgefill.pipeline.stages import PipelineRunner

logger = logging.getLogger(__name__)


class TrainCommand:
    """train --stage: one pipeline stage, checkpoint + loss log + manifest"""

    name = "train"

    def register(self, subparsers) -> argparse.ArgumentParser:
        parser = subparsers.add_parser(self.name, help="run one training stage")
        parser.add_argument("--stage", required=True, choices=ArtifactStore.STAGES)
        parser.add_argument("--resume", action="store_true",
                            help="continue from this stage's checkpoint instead of starting over")
        add_run_options(parser)
        parser.set_defaults(handler=self.run)
        return parser

    def run(self, args: argparse.Namespace) -> int:
        config, store = open_run(args)
        # upstream artifacts from an edited config are used with a warning
        runner = PipelineRunner(config, store, ignore_config_hash=True)
        runner.train(args.stage, seed=args.seed, resume=args.resume)
        return 0


# Global instance
train_command = TrainCommand()
