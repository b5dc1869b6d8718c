import json
import os

import pytest
from configura import config
from marshmallow import ValidationError

from library import utils
from library.cli_utils import merge, read_config_file, resolve_config
from library.exceptions import ParameterError
from schemas.config import (
    EmpiricalConfigSchema,
    ProbeConfigSchema,
    SynthConfigSchema,
    ToyConfigSchema,
    TrainConfigSchema,
)


class TestSchemas:
    def test_defaults_load(self):
        train = TrainConfigSchema().load(config.train)
        assert train.model.widths == (16, 32, 64, 128)
        assert train.global_size == (64, 128)
        assert train.ablate == ()

        assert SynthConfigSchema().load(config.synth).num_classes == 6
        assert ProbeConfigSchema().load(config.probe).num_classes == 6
        assert ToyConfigSchema().load(config.analysis["toy"]).radii
        assert EmpiricalConfigSchema().load(config.analysis["empirical"]).n_bins >= 1

    def test_series_from_string(self):
        synth = SynthConfigSchema().load({"dt_range": "0:2", "shapes_range": "1,3"})
        assert synth.dt_range == (0, 2) and synth.shapes_range == (1, 3)

    def test_unordered_pair(self):
        with pytest.raises(ValidationError):
            SynthConfigSchema().load({"dt_range": [3, 1]})

    def test_pair_length(self):
        with pytest.raises(ValidationError):
            SynthConfigSchema().load({"dt_range": [1, 2, 3]})

    def test_both_losses_ablated(self):
        with pytest.raises(ValidationError):
            TrainConfigSchema().load({"ablate": ["dense", "pool"]})

    def test_duplicate_ablations_collapse(self):
        assert TrainConfigSchema().load({"ablate": "topdown,topdown"}).ablate == ("topdown",)

    def test_unknown_ablation(self):
        with pytest.raises(ValidationError):
            TrainConfigSchema().load({"ablate": ["decoder"]})

    def test_area_range_must_be_a_fraction(self):
        with pytest.raises(ValidationError):
            TrainConfigSchema().load({"subcrop_area_range": [0.5, 1.5]})


class TestConfigFiles:
    def test_key_value_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# tiny model\nseed = 4\nmodel.widths=8,16,16,16  # comment\n\nmodel.proj_dim=8\n")

        assert read_config_file(str(path), "train") == {
            "seed": "4",
            "model": {"widths": "8,16,16,16", "proj_dim": "8"},
        }

    def test_line_without_equals(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed 4\n")
        with pytest.raises(ValidationError):
            read_config_file(str(path), "train")

    def test_run_manifest_section(self, tmp_path):
        path = tmp_path / utils.RUN_MANIFEST_NAME
        path.write_text(json.dumps({"config": {"synth": {"scenes": 7}}}))
        assert read_config_file(str(path), "synth") == {"scenes": 7}
        assert read_config_file(str(path), "train") == {}

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_config_file(str(tmp_path / "none.cfg"), "train")

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed=4\nbatch_size=2\nmodel.proj_dim=8\n")
        train = resolve_config(TrainConfigSchema(), config.train, str(path), {"seed": 9, "epochs": None}, "train")

        assert (train.seed, train.batch_size, train.epochs) == (9, 2, config.train["epochs"])
        assert train.model.proj_dim == 8
        assert train.model.widths == tuple(config.train["model"]["widths"])

    def test_manifest_round_trip(self, tmp_path):
        train = TrainConfigSchema().load(config.train)
        utils.write_run_manifest(str(tmp_path), "train", {"train": train.to_dict()}, train.seed, {})
        reloaded = resolve_config(
            TrainConfigSchema(), config.train, str(tmp_path / utils.RUN_MANIFEST_NAME), {}, "train"
        )
        assert reloaded == train

    def test_merge_is_recursive(self):
        assert merge({"a": {"b": 1, "c": 2}}, {"a": {"c": 3}}) == {"a": {"b": 1, "c": 3}}


class TestUtils:
    def test_thread_budget(self, monkeypatch):
        assert utils.thread_budget() == (os.cpu_count() or 1)
        monkeypatch.setenv(utils.THREADS_ENV, "3")
        assert utils.thread_budget() == 3

    @pytest.mark.parametrize("raw", ["zero", "0", "-2"])
    def test_invalid_thread_budget(self, monkeypatch, raw):
        monkeypatch.setenv(utils.THREADS_ENV, raw)
        with pytest.raises(ParameterError):
            utils.thread_budget()

    def test_digest_ignores_key_order(self):
        assert utils.digest({"a": 1, "b": [1, 2]}) == utils.digest({"b": [1, 2], "a": 1})
        assert len(utils.digest({})) == 64

    def test_jsonable(self):
        import numpy as np

        assert utils.jsonable({"a": (1, np.float32(0.5)), 2: [np.int64(3)]}) == {"a": [1, 0.5], "2": [3]}
