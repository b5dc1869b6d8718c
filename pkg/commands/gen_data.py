import dataclasses
import os

import click
from configura import config
from loguru import logger

from library import utils
from library.cli_utils import handle_errors, prepare_output, resolve_config
from library.formats import MANIFEST_NAME
from library.synth import write_dataset
from schemas.config import SynthConfigSchema


def parse_canvas(ctx, param, value):
    if value is None:
        return None

    try:
        height, width = (int(part) for part in value.lower().split("x"))
    except ValueError:
        raise click.BadParameter("Expected HxW, for instance 128x256.")

    return height, width


@click.command("gen-data")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Dataset directory.")
@click.option("--scenes", type=int, help="Number of frame pairs.")
@click.option("--seed", type=int, help="Scene seed.")
@click.option("--canvas", callback=parse_canvas, help="Frame size as HxW.")
@click.option("--dt-range", help="Temporal stride range as lo:hi.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="key=value config file.")
@handle_errors
def gen_data(out, scenes, seed, canvas, dt_range, config_path):
    """
    Render a synthetic moving-shapes dataset.
    """

    height, width = canvas if canvas else (None, None)
    synth = resolve_config(
        SynthConfigSchema(),
        config.synth,
        config_path,
        {"scenes": scenes, "seed": seed, "height": height, "width": width, "dt_range": dt_range},
        section="synth",
    )

    prepare_output(out)
    with utils.limit_threads() as threads:
        manifest = write_dataset(synth, out, n_jobs=threads)

    resolved = dataclasses.asdict(synth)
    resolved.pop("classes")
    utils.write_run_manifest(
        out, "gen-data", {"synth": resolved}, synth.seed, {"manifest": MANIFEST_NAME, "samples": "<id>/"}
    )
    logger.info(f"Dataset manifest: '{os.path.abspath(manifest)}'.")


def setup():
    return gen_data
