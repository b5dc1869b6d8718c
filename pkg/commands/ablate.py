import dataclasses
import os

import click
from configura import config

from library import utils
from library.cli_utils import handle_errors, prepare_output, resolve_config
from library.synth import ManifestDataset
from library.trainer import ABLATION_NAME, ABLATION_ROWS, run_ablation_grid
from schemas.config import ProbeConfigSchema, TrainConfigSchema


@click.command("ablate")
@click.option("--data", required=True, type=click.Path(), help="Dataset manifest or directory.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Base train config.")
@click.option("--probe-config", type=click.Path(dir_okay=False))
@click.option("--row", "rows", multiple=True, type=click.Choice(list(ABLATION_ROWS)), help="Row to run. Repeatable.")
@click.option("--steps", type=int, help="Training steps per row.")
@click.option("--seed", type=int)
@click.option("--no-scratch", is_flag=True, help="Skip the randomly initialized baseline row.")
@click.option("--quiet", is_flag=True, help="Hide progress bars.")
@handle_errors
def ablate(data, out, config_path, probe_config, rows, steps, seed, no_scratch, quiet):
    """
    Train and probe every component ablation on the same data and seed.
    """

    train_config = resolve_config(
        TrainConfigSchema(), config.train, config_path, {"max_steps": steps, "seed": seed}, section="train"
    )
    probe_config = resolve_config(ProbeConfigSchema(), config.probe, probe_config, {}, section="probe")
    dataset = ManifestDataset(data, train_config.alpha1, train_config.alpha2)

    prepare_output(out)
    with utils.limit_threads():
        results = run_ablation_grid(
            train_config,
            dataset,
            probe_config,
            out,
            rows=list(rows) if rows else None,
            include_scratch=not no_scratch,
            progress=not quiet,
        )

    utils.write_run_manifest(
        out,
        "ablate",
        {
            "train": train_config.to_dict(),
            "probe": dataclasses.asdict(probe_config),
            "rows": [row.name for row in results],
            "data": os.path.abspath(data),
        },
        train_config.seed,
        {"ablation": ABLATION_NAME, "rows": "<row>/"},
    )

    for row in results:
        click.echo(f"{row.name:>14}  mIoU {row.result.miou:.4f}  acc {row.result.acc:.4f}")


def setup():
    return ablate
