"""
Command package for the wedgefill CLI.

One class per subcommand; each registers its own arguments:
- DatasetCommand: gen-dataset
- TrainCommand: train --stage
- InferCommand: infer
- EvalCommand: eval
- ConfigCommand: show-config
"""

from .config_command import config_command
from .dataset_command import dataset_command
from .eval_command import eval_command
from .infer_command import infer_command
from .train_command import train_command

__all__ = [
    'dataset_command',
    'train_command',
    'infer_command',
    'eval_command',
    'config_command',
]
