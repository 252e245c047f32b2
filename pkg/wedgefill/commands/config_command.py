import argparse

from wedgefill.core.config import load_config, serialize_config


class ConfigCommand:
    """show-config: canonical serialization and hash"""

    name = "show-config"

    def register(self, subparsers) -> argparse.ArgumentParser:
        parser = subparsers.add_parser(self.name, help="print the canonical configuration and its hash")
        parser.add_argument("--config", default=None)
        parser.set_defaults(handler=self.run)
        return parser

    def run(self, args: argparse.Namespace) -> int:
        config = load_config(args.config)
        print(serialize_config(config), end="")
        print(f"# config_hash = {config.config_hash}")
        return 0


# Global instance
config_command = ConfigCommand()
