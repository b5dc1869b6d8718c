import csv
import filecmp
import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

import database
from app import cli
from library.formats import MANIFEST_NAME
from library.network import save_checkpoint
from library.synth import ManifestDataset
from library.utils import RUN_MANIFEST_NAME
from models.run import Run


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def dataset(runner, tmp_path):
    out = tmp_path / "data"
    result = runner.invoke(cli, ["gen-data", "--out", str(out), "--scenes", "2", "--canvas", "32x64", "--seed", "1"])
    assert result.exit_code == 0, result.output
    return out


class TestGenData:
    def test_layout(self, dataset):
        assert os.path.isfile(dataset / MANIFEST_NAME)
        assert sorted(name for name in os.listdir(dataset) if os.path.isdir(dataset / name)) == ["00000", "00001"]

        with open(dataset / RUN_MANIFEST_NAME) as file:
            manifest = json.load(file)
        assert manifest["command"] == "gen-data" and manifest["seed"] == 1
        assert manifest["config"]["synth"]["height"] == 32

    def test_registry_holds_the_manifest(self, dataset):
        database.open_registry(str(dataset))
        try:
            (run,) = list(Run.select())
            with open(dataset / RUN_MANIFEST_NAME) as file:
                assert run.to_json() == json.load(file)
        finally:
            database.close_registry()

    def test_zero_stride(self, runner, tmp_path):
        out = tmp_path / "static"
        result = runner.invoke(cli, ["gen-data", "--out", str(out), "--scenes", "1", "--canvas", "32x64", "--dt-range", "0:0"])
        assert result.exit_code == 0, result.output

        sample = ManifestDataset(str(out))[0]
        assert sample.dt == 0
        np.testing.assert_array_equal(sample.frame_t, sample.frame_t_plus)
        np.testing.assert_array_equal(sample.flow_fwd.data, 0.0)

    def test_rerun_is_byte_identical(self, runner, dataset, tmp_path):
        again = tmp_path / "again"
        result = runner.invoke(
            cli, ["gen-data", "--out", str(again), "--config", str(dataset / RUN_MANIFEST_NAME)]
        )
        assert result.exit_code == 0, result.output

        assert filecmp.cmp(dataset / MANIFEST_NAME, again / MANIFEST_NAME, shallow=False)
        for sample in ("00000", "00001"):
            comparison = filecmp.dircmp(dataset / sample, again / sample)
            assert comparison.diff_files == [] and comparison.left_only == [] and comparison.right_only == []

    def test_bad_canvas(self, runner, tmp_path):
        result = runner.invoke(cli, ["gen-data", "--out", str(tmp_path / "x"), "--canvas", "big"])
        assert result.exit_code == 2

    def test_output_is_a_file(self, runner, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        result = runner.invoke(cli, ["gen-data", "--out", str(blocker), "--scenes", "1"])
        assert result.exit_code == 2
        assert "C03" in result.output

    def test_invalid_config_value(self, runner, tmp_path):
        result = runner.invoke(cli, ["gen-data", "--out", str(tmp_path / "x"), "--scenes", "0"])
        assert result.exit_code == 2
        assert "C01" in result.output


class TestTrain:
    def test_unknown_ablation_flag(self, runner, dataset, tmp_path):
        result = runner.invoke(cli, ["train", "--data", str(dataset), "--out", str(tmp_path / "run"), "--ablate", "decoder"])
        assert result.exit_code == 2

    def test_missing_data(self, runner, tmp_path):
        result = runner.invoke(cli, ["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "run")])
        assert result.exit_code == 2
        assert "C04" in result.output

    def test_tiny_run(self, runner, dataset, tmp_path):
        config = tmp_path / "tiny.cfg"
        config.write_text(
            "global_size=32,64\nsubcrop_size=32\nnum_subcrops=2\ncheckpoint_every=0\n"
            "model.widths=8,16,16,16\nmodel.proj_hidden=8\nmodel.proj_dim=8\n"
        )
        out = tmp_path / "run"
        result = runner.invoke(
            cli,
            ["train", "--data", str(dataset), "--out", str(out), "--config", str(config), "--steps", "1", "--batch-size", "2", "--quiet"],
        )
        assert result.exit_code == 0, result.output

        with open(out / "metrics.csv", newline="") as file:
            assert len(list(csv.reader(file))) == 2
        assert os.path.isfile(out / "checkpoint_000001.ckpt")

        probe = runner.invoke(
            cli,
            ["probe", "--data", str(dataset), "--out", str(tmp_path / "probe"), "--checkpoint", str(out / "checkpoint_000001.ckpt"), "--epochs", "1"],
        )
        assert probe.exit_code == 0, probe.output
        assert "step-1" in probe.output

    def test_pool_ablation_zeroes_the_pooled_column(self, runner, dataset, tmp_path):
        config = tmp_path / "tiny.cfg"
        config.write_text(
            "global_size=32,64\nsubcrop_size=32\nnum_subcrops=2\ncheckpoint_every=0\n"
            "model.widths=8,16,16,16\nmodel.proj_hidden=8\nmodel.proj_dim=8\n"
        )
        out = tmp_path / "run"
        result = runner.invoke(
            cli,
            ["train", "--data", str(dataset), "--out", str(out), "--config", str(config), "--ablate", "pool", "--steps", "2", "--batch-size", "1", "--quiet"],
        )
        assert result.exit_code == 0, result.output

        with open(out / "metrics.csv", newline="") as file:
            rows = list(csv.DictReader(file))
        assert len(rows) == 2
        assert all(float(row["pooled"]) == 0.0 for row in rows)


class TestProbe:
    def test_digest_mismatch(self, runner, dataset, tmp_path):
        checkpoint = tmp_path / "foreign.ckpt"
        save_checkpoint(str(checkpoint), {"x": np.zeros(2, dtype=np.float32)}, "cd" * 32, 5)

        result = runner.invoke(
            cli, ["probe", "--data", str(dataset), "--out", str(tmp_path / "probe"), "--checkpoint", str(checkpoint)]
        )
        assert result.exit_code == 3
        assert "D02" in result.output

    def test_needs_exactly_one_model(self, runner, dataset, tmp_path):
        result = runner.invoke(cli, ["probe", "--data", str(dataset), "--out", str(tmp_path / "probe")])
        assert result.exit_code == 2


class TestVerify:
    def test_ema_suite(self, runner):
        result = runner.invoke(cli, ["verify", "--suite", "ema"])
        assert result.exit_code == 0, result.output
        assert "[ema] PASS" in result.output


class TestAnalyze:
    def test_toy(self, runner, tmp_path):
        out = tmp_path / "toy"
        result = runner.invoke(cli, ["analyze", "toy", "--out", str(out), "--radii", "4,8", "--areas", "0.04"])
        assert result.exit_code == 0, result.output

        with open(out / "toy.csv", newline="") as file:
            rows = list(csv.reader(file))
        assert [row[0] for row in rows[1:]] == ["4.0", "8.0"]
        assert os.path.isfile(out / "toy.json")

    def test_class_shift(self, runner, dataset, tmp_path):
        out = tmp_path / "shift"
        result = runner.invoke(
            cli, ["analyze", "class-shift", "--data", str(dataset), "--out", str(out), "--n-subcrops", "16"]
        )
        assert result.exit_code == 0, result.output
        with open(out / "class_shift.csv", newline="") as file:
            assert len(list(csv.reader(file))) == 7
