import dataclasses
import os

import click
from configura import config

from library import utils
from library.cli_utils import fail, handle_errors, prepare_output, resolve_config
from library.network import init_state
from library.synth import ManifestDataset
from library.trainer import linear_probe, load_model, write_probe_csv
from schemas.config import ProbeConfigSchema, TrainConfigSchema

PROBE_NAME = "probe.csv"


def default_train_config(checkpoint):
    """
    The run manifest next to a checkpoint describes the model it was trained with.
    """

    if checkpoint:
        candidate = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), utils.RUN_MANIFEST_NAME)
        if os.path.exists(candidate):
            return candidate

    return None


@click.command("probe")
@click.option("--data", required=True, type=click.Path(), help="Dataset manifest or directory.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Checkpoint written by `train`.")
@click.option("--scratch", is_flag=True, help="Probe a randomly initialized model instead.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Train config or run_manifest.json.")
@click.option("--probe-config", type=click.Path(dir_okay=False), help="key=value probe config file.")
@click.option("--epochs", type=int, help="Probe epochs.")
@click.option("--seed", type=int, help="Probe seed.")
@click.option("--tag", help="Row tag. Defaults to `step-<n>` or `scratch`.")
@handle_errors
def probe(data, out, checkpoint, scratch, config_path, probe_config, epochs, seed, tag):
    """
    Fit a linear segmentation readout on frozen features and report mIoU.
    """

    if bool(checkpoint) == scratch:
        fail("C01", "Pass exactly one of --checkpoint and --scratch.")

    train_config = resolve_config(
        TrainConfigSchema(), config.train, config_path or default_train_config(checkpoint), {}, section="train"
    )
    probe_config = resolve_config(
        ProbeConfigSchema(), config.probe, probe_config, {"epochs": epochs, "seed": seed}, section="probe"
    )
    dataset = ManifestDataset(data)

    if scratch:
        state = init_state(train_config.model_config, train_config.base_momentum)
        tag = tag or "scratch"
    else:
        if not os.path.exists(checkpoint):
            raise FileNotFoundError(f"Checkpoint '{checkpoint}' does not exist.")
        state = load_model(checkpoint, train_config.model_config, train_config.base_momentum)
        tag = tag or ("scratch" if state.step == 0 else f"step-{state.step}")

    prepare_output(out)
    with utils.limit_threads():
        result = linear_probe(state, dataset, probe_config)

    path = write_probe_csv([(tag, result)], os.path.join(out, PROBE_NAME), probe_config.num_classes)
    utils.write_run_manifest(
        out,
        "probe",
        {
            "probe": dataclasses.asdict(probe_config),
            "train": train_config.to_dict(),
            "checkpoint": os.path.abspath(checkpoint) if checkpoint else None,
            "data": os.path.abspath(data),
        },
        probe_config.seed,
        {"probe": PROBE_NAME},
    )

    click.echo(f"{tag}: mIoU {result.miou:.4f}, acc {result.acc:.4f}, fg-mIoU {result.fg_miou:.4f} ({path})")


def setup():
    return probe
