import dataclasses
import os

import click
from configura import config
from loguru import logger

from library import utils
from library.analysis import (
    class_shift_analysis,
    empirical_subcrop_sim,
    toy_sweep,
    write_class_shift_csv,
    write_subcrop_csv,
)
from library.cli_utils import handle_errors, prepare_output, resolve_config
from library.synth import ManifestDataset
from schemas.config import EmpiricalConfigSchema, ToyConfigSchema

TOY_NAME = "toy.csv"
EMPIRICAL_NAME = "empirical.csv"
CLASS_SHIFT_NAME = "class_shift.csv"


def _empirical_config(config_path, overrides):
    return resolve_config(EmpiricalConfigSchema(), config.analysis["empirical"], config_path, overrides, "empirical")


@click.group("analyze")
def analyze():
    """
    Subcrop statistics: toy circle simulation, labeled-data simulation and
    class distribution shift.
    """


@analyze.command("toy")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--radii", help="Circle radii, comma separated.")
@click.option("--areas", help="Subcrop area fractions, comma separated.")
@click.option("--threshold", type=float, help="Minimum covered fraction for a hit.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@handle_errors
def toy(out, radii, areas, threshold, config_path):
    """
    Hit probability of a centered circle by exhaustively enumerated subcrops.
    """

    toy_config = resolve_config(
        ToyConfigSchema(),
        config.analysis["toy"],
        config_path,
        {"radii": radii, "areas": areas, "threshold": threshold},
        section="toy",
    )

    prepare_output(out)
    with utils.limit_threads() as threads:
        result = toy_sweep(toy_config, n_jobs=threads)

    write_subcrop_csv(result, os.path.join(out, TOY_NAME))
    utils.write_run_manifest(out, "analyze toy", {"toy": dataclasses.asdict(toy_config)}, 0, {"records": TOY_NAME})

    for record in result.records:
        click.echo(f"radius {record.descriptor:g}: hit {record.hit_prob:.4f}, pixel {record.pixel_prob:.4f}")

    for note in result.notes:
        logger.warning(note)


@analyze.command("empirical")
@click.option("--data", required=True, type=click.Path(), help="Dataset manifest or directory.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n-subcrops", type=int, help="Subcrops per global crop.")
@click.option("--bins", "n_bins", type=int, help="Object size bins.")
@click.option("--seed", type=int)
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@handle_errors
def empirical(data, out, n_subcrops, n_bins, seed, config_path):
    """
    Per object instance, the probability that a subcrop of a global crop is hit
    compared with the probability that a pixel is.
    """

    empirical_config = _empirical_config(config_path, {"n_subcrops": n_subcrops, "n_bins": n_bins, "seed": seed})
    dataset = ManifestDataset(data)

    prepare_output(out)
    with utils.limit_threads() as threads:
        result = empirical_subcrop_sim(dataset, empirical_config, n_jobs=threads)

    write_subcrop_csv(result, os.path.join(out, EMPIRICAL_NAME))
    utils.write_run_manifest(
        out,
        "analyze empirical",
        {"empirical": dataclasses.asdict(empirical_config), "data": os.path.abspath(data)},
        empirical_config.seed,
        {"records": EMPIRICAL_NAME},
    )

    for note in result.notes:
        logger.warning(note)


@analyze.command("class-shift")
@click.option("--data", required=True, type=click.Path(), help="Dataset manifest or directory.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--fg-threshold", type=float, help="Minimum foreground fraction to keep a subcrop.")
@click.option("--n-subcrops", type=int)
@click.option("--seed", type=int)
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@handle_errors
def class_shift(data, out, fg_threshold, n_subcrops, seed, config_path):
    """
    Class frequencies over pixels against frequencies over labeled subcrops.
    """

    empirical_config = _empirical_config(
        config_path, {"fg_threshold": fg_threshold, "n_subcrops": n_subcrops, "seed": seed}
    )
    dataset = ManifestDataset(data)

    prepare_output(out)
    with utils.limit_threads() as threads:
        records = class_shift_analysis(dataset, empirical_config, n_jobs=threads)

    write_class_shift_csv(records, os.path.join(out, CLASS_SHIFT_NAME))
    utils.write_run_manifest(
        out,
        "analyze class-shift",
        {"empirical": dataclasses.asdict(empirical_config), "data": os.path.abspath(data)},
        empirical_config.seed,
        {"records": CLASS_SHIFT_NAME},
    )

    for record in records:
        click.echo(f"class {record.class_id}: pixel {record.pixel_freq:.4f}, subcrop {record.subcrop_freq:.4f}")


def setup():
    return analyze
