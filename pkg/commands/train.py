import os

import click
from configura import config

from library import utils
from library.cli_utils import handle_errors, prepare_output, resolve_config
from library.synth import ManifestDataset
from library.trainer import METRICS_NAME, Trainer
from library.types import ablation_flags
from schemas.config import TrainConfigSchema


@click.command("train")
@click.option("--data", required=True, type=click.Path(), help="Dataset manifest or directory.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Run directory.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="key=value file or run_manifest.json.")
@click.option("--ablate", multiple=True, type=click.Choice(ablation_flags), help="Component to switch off. Repeatable.")
@click.option("--seed", type=int)
@click.option("--steps", type=int, help="Stop after this many steps (0 runs every epoch).")
@click.option("--epochs", type=int)
@click.option("--batch-size", type=int)
@click.option("--num-subcrops", type=int)
@click.option("--resume", type=click.Path(dir_okay=False), help="Checkpoint to continue from.")
@click.option("--quiet", is_flag=True, help="Hide the progress bar.")
@handle_errors
def train(data, out, config_path, ablate, seed, steps, epochs, batch_size, num_subcrops, resume, quiet):
    """
    Train the online and offline networks on a dataset.
    """

    overrides = {
        "seed": seed,
        "max_steps": steps,
        "epochs": epochs,
        "batch_size": batch_size,
        "num_subcrops": num_subcrops,
        "ablate": list(ablate) if ablate else None,
    }
    train_config = resolve_config(TrainConfigSchema(), config.train, config_path, overrides, section="train")
    dataset = ManifestDataset(data, train_config.alpha1, train_config.alpha2)

    prepare_output(out)
    trainer = Trainer(train_config, dataset, out, progress=not quiet)
    if resume:
        trainer.resume(resume)

    with utils.limit_threads():
        trainer.run()

    utils.write_run_manifest(
        out,
        "train",
        {"train": train_config.to_dict(), "data": os.path.abspath(data)},
        train_config.seed,
        {"metrics": METRICS_NAME, "checkpoints": "checkpoint_<step>.ckpt"},
    )


def setup():
    return train
