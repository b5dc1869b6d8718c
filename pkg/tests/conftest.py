import os

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture(autouse=True)
def repo_root(monkeypatch):
    """Config files and suite plugins are resolved relative to the working directory."""
    monkeypatch.chdir(ROOT)
    monkeypatch.delenv("POODLE_THREADS", raising=False)
    yield ROOT


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    from library.network import ModelConfig
    from library.trainer import TrainConfig

    return TrainConfig(
        seed=3,
        batch_size=2,
        epochs=1,
        max_steps=2,
        warmup_epochs=0.5,
        global_size=(32, 64),
        num_subcrops=2,
        subcrop_size=32,
        model=ModelConfig(widths=(8, 16, 16, 16), proj_hidden=8, proj_dim=8),
        checkpoint_every=0,
        prefetch_depth=1,
    )


@pytest.fixture
def tiny_dataset():
    from library.synth import SynthConfig, SyntheticDataset

    return SyntheticDataset.from_config(SynthConfig(scenes=4, height=48, width=96, seed=2))
