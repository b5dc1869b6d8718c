import logging
import os
import sys
from importlib import import_module

import click
from configura import config
from loguru import logger

logging.getLogger("PIL.PngImagePlugin").setLevel(logging.INFO)
logging.getLogger("PIL.Image").setLevel(logging.INFO)
logging.getLogger("peewee").setLevel(logging.INFO)


def configure_logging(verbose: bool = False) -> None:
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else config.main["log_level"])


@click.group()
@click.option("--verbose", is_flag=True, help="Log debug messages.")
@click.version_option(config.main["version"], prog_name=config.main["name"])
def cli(verbose: bool) -> None:
    """
    Flow-equivariant dense self-supervised learning on synthetic video.
    """

    configure_logging(verbose)


def register_commands(group: click.Group) -> None:
    """
    Register the command that every module in the `commands` directory sets up.
    """

    directory = os.path.join(os.path.dirname(os.path.abspath(__file__)), "commands")
    for file in sorted(os.listdir(directory)):
        if not file.endswith(".py") or file == "__init__.py":
            continue

        module = import_module(f"commands.{file[:-3]}")
        group.add_command(module.setup())

        logger.debug(f"Registered command {file}.")


register_commands(cli)


if __name__ == "__main__":
    cli()
