import csv
import os
from dataclasses import replace

import numpy as np
import pytest

from library.cropping import SubcropSampler
from library.exceptions import CheckpointDigestError, NonFiniteLossError, ParameterError
from library.network import init_state
from library.synth import SynthConfig
from library.tensor import Tensor
from library.trainer import (
    ABLATION_NAME,
    METRICS_COLUMNS,
    AdamW,
    ProbeConfig,
    ProbeResult,
    Schedule,
    Trainer,
    batch_indices,
    evaluate_predictions,
    fit_probe,
    learning_rate,
    linear_probe,
    load_model,
    model_digest,
    prepare_batch,
    read_checkpoint,
    run_ablation_grid,
    step_rng,
    train_step,
    write_probe_csv,
)

NUM_CLASSES = SynthConfig().num_classes


class TestTrainConfig:
    def test_both_losses_ablated(self, tiny_config):
        with pytest.raises(ParameterError):
            tiny_config.with_ablations(("dense", "pool"))

    def test_unknown_flag(self, tiny_config):
        with pytest.raises(ParameterError):
            tiny_config.with_ablations(("decoder",))

    def test_negative_max_steps(self, tiny_config):
        with pytest.raises(ParameterError):
            replace(tiny_config, max_steps=-1)

    def test_ablations_reach_the_architecture(self, tiny_config):
        model = tiny_config.with_ablations(("topdown",)).model_config
        assert not model.topdown and model.lateral
        assert model.init_seed == tiny_config.seed

    def test_total_steps(self, tiny_config):
        assert tiny_config.steps_per_epoch(4) == 2
        assert tiny_config.total_steps(4) == 2
        assert replace(tiny_config, max_steps=0, epochs=3).total_steps(4) == 6

    def test_digest_ignores_init_seed(self, tiny_config):
        model = tiny_config.model_config
        assert model_digest(replace(model, init_seed=99)) == model_digest(model)
        assert model_digest(replace(model, lateral=False)) != model_digest(model)


class TestSchedule:
    def test_warmup_then_cosine(self):
        assert learning_rate(0, 10, 2, 1.0) == 0.0
        assert learning_rate(1, 10, 2, 1.0) == pytest.approx(0.5)
        assert learning_rate(2, 10, 2, 1.0) == pytest.approx(1.0)
        assert learning_rate(6, 10, 2, 1.0) == pytest.approx(0.5)
        assert learning_rate(10, 10, 2, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_warmup_in_epochs(self):
        schedule = Schedule(total_steps=20, steps_per_epoch=4, warmup_epochs=1.5, base_lr=0.1)
        assert schedule.warmup_steps == 6
        assert schedule.lr_at(3) == pytest.approx(0.05)


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        weight = Tensor(np.ones(1, dtype=np.float32), requires_grad=True)
        bias = Tensor(np.ones(1, dtype=np.float32), requires_grad=True)
        frozen = Tensor(np.ones(1, dtype=np.float32), requires_grad=True)
        weight.grad = np.full(1, 2.0, dtype=np.float32)
        bias.grad = np.full(1, 2.0, dtype=np.float32)

        optimizer = AdamW({"a.weight": weight, "a.bias": bias, "b.weight": frozen}, weight_decay=0.5)
        optimizer.step(0.1)

        np.testing.assert_allclose(weight.data, 0.85, atol=1e-6)
        np.testing.assert_allclose(bias.data, 0.9, atol=1e-6)
        np.testing.assert_array_equal(frozen.data, 1.0)
        assert optimizer.t == 1

    def test_state_roundtrip(self):
        weight = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        weight.grad = np.ones(3, dtype=np.float32)
        optimizer = AdamW({"w.weight": weight})
        optimizer.step(0.01)

        restored = AdamW({"w.weight": weight})
        restored.load_state_arrays(optimizer.state_arrays(), optimizer.t)
        assert restored.t == 1
        np.testing.assert_array_equal(restored.m["w.weight"], optimizer.m["w.weight"])


class TestBatches:
    def test_epoch_visits_every_sample_once(self, tiny_config):
        seen = np.concatenate([batch_indices(tiny_config, 4, step) for step in range(2)])
        assert sorted(seen.tolist()) == [0, 1, 2, 3]

    def test_same_rng_same_batch(self, tiny_config, tiny_dataset):
        samples = [tiny_dataset[0], tiny_dataset[1]]
        first = prepare_batch(samples, tiny_config, step_rng(3, 5), SubcropSampler(2))
        second = prepare_batch(samples, tiny_config, step_rng(3, 5), SubcropSampler(2))

        np.testing.assert_array_equal(first.view_t, second.view_t)
        np.testing.assert_array_equal(first.sub_t_plus, second.sub_t_plus)
        assert first.aug_t == second.aug_t

    def test_batch_layout(self, tiny_config, tiny_dataset):
        batch = prepare_batch([tiny_dataset[2]], tiny_config, step_rng(0, 0), SubcropSampler(2))

        assert batch.view_t.shape == (1, 3, 32, 64)
        assert batch.flow_fwd[0].data.shape == (32, 64, 2)
        assert batch.occ_bwd[0].shape == (32, 64)
        assert batch.sub_t.shape[1:] == (3, 32, 32)

    def test_no_sampler_no_subcrops(self, tiny_config, tiny_dataset):
        batch = prepare_batch([tiny_dataset[0]], tiny_config, step_rng(0, 0))
        assert batch.sub_t is None and batch.pairs == 0

    def test_pool_off_never_calls_the_sampler(self, tiny_config, tiny_dataset):
        sampler = SubcropSampler(2)
        batch = prepare_batch([tiny_dataset[0]], tiny_config.with_ablations(("pool",)), step_rng(0, 0), sampler)

        assert sampler.calls == 0
        assert batch.sub_t is None and batch.pairs == 0


class TestTrainer:
    def test_run_writes_metrics_and_checkpoint(self, tmp_path, tiny_config, tiny_dataset):
        trainer = Trainer(tiny_config, tiny_dataset, str(tmp_path), progress=False)
        trainer.run()

        with open(trainer.metrics_path, newline="") as file:
            rows = list(csv.reader(file))
        assert rows[0] == METRICS_COLUMNS
        assert [row[0] for row in rows[1:]] == ["0", "1"]
        assert os.path.isfile(trainer.checkpoint_path(2))
        assert trainer.step == 2

    def test_resume_matches_uninterrupted_run(self, tmp_path, tiny_config, tiny_dataset):
        straight = Trainer(tiny_config, tiny_dataset, str(tmp_path / "straight"), progress=False)
        straight.run()

        first = Trainer(tiny_config, tiny_dataset, str(tmp_path / "split"), progress=False)
        first.run(until=1)
        resumed = Trainer(tiny_config, tiny_dataset, str(tmp_path / "split"), progress=False)
        resumed.resume(first.checkpoint_path(1))
        resumed.run()

        for name, tensor in straight.state.online.items():
            np.testing.assert_array_equal(resumed.state.online[name].data, tensor.data)
        for name, value in straight.state.offline.items():
            np.testing.assert_array_equal(resumed.state.offline[name], value)

        with open(resumed.metrics_path, newline="") as file:
            assert len(list(csv.reader(file))) == 3

    def test_resume_from_an_earlier_checkpoint_rewrites_later_rows(self, tmp_path, tiny_config, tiny_dataset):
        config = replace(tiny_config, checkpoint_every=1)
        trainer = Trainer(config, tiny_dataset, str(tmp_path), progress=False)
        trainer.run()
        with open(trainer.metrics_path, newline="") as file:
            uninterrupted = file.read()

        resumed = Trainer(config, tiny_dataset, str(tmp_path), progress=False)
        resumed.resume(trainer.checkpoint_path(1))
        resumed.run()

        with open(resumed.metrics_path, newline="") as file:
            rewritten = file.read()
        assert [row[0] for row in list(csv.reader(rewritten.splitlines()))[1:]] == ["0", "1"]
        assert rewritten == uninterrupted

    def test_optimizer_count_travels_with_the_step(self, tmp_path, tiny_config, tiny_dataset):
        trainer = Trainer(tiny_config, tiny_dataset, str(tmp_path), progress=False)
        trainer.state.step = trainer.optimizer.t = 2**24 + 1
        path = trainer.save()

        resumed = Trainer(tiny_config, tiny_dataset, str(tmp_path), progress=False)
        resumed.resume(path)
        assert resumed.optimizer.t == 2**24 + 1
        assert not any(name.startswith("adam_t") for name in trainer.optimizer.state_arrays())

    def test_pool_ablation_logs_a_zero_pooled_column(self, tmp_path, tiny_config, tiny_dataset):
        trainer = Trainer(tiny_config.with_ablations(("pool",)), tiny_dataset, str(tmp_path), progress=False)
        trainer.run()

        with open(trainer.metrics_path, newline="") as file:
            rows = list(csv.DictReader(file))
        assert trainer.sampler is None
        assert [float(row["pooled"]) for row in rows] == [0.0, 0.0]

    @pytest.mark.slow
    def test_same_seed_gives_identical_metrics(self, tmp_path, tiny_config, tiny_dataset):
        config = replace(tiny_config, epochs=25, max_steps=50)
        contents = []
        for name in ("first", "second"):
            trainer = Trainer(config, tiny_dataset, str(tmp_path / name), progress=False)
            trainer.run()
            with open(trainer.metrics_path, "rb") as file:
                contents.append(file.read())

        assert contents[0].count(b"\n") == 51
        assert contents[0] == contents[1]

    def test_checkpoint_for_another_architecture(self, tmp_path, tiny_config, tiny_dataset):
        trainer = Trainer(tiny_config, tiny_dataset, str(tmp_path), progress=False)
        path = trainer.save()
        other = tiny_config.with_ablations(("lateral",)).model_config

        with pytest.raises(CheckpointDigestError) as error:
            read_checkpoint(path, other)
        assert error.value.provided == trainer.digest

    def test_load_model(self, tmp_path, tiny_config, tiny_dataset):
        trainer = Trainer(tiny_config, tiny_dataset, str(tmp_path), progress=False)
        trainer.run()
        state = load_model(trainer.checkpoint_path(2), tiny_config.model_config)

        assert state.step == 2
        assert not any(name.startswith("adam_") for name in state.online)

    def test_empty_dataset(self, tmp_path, tiny_config):
        with pytest.raises(ParameterError):
            Trainer(tiny_config, [], str(tmp_path))

    def test_non_finite_loss_stops_before_update(self, tmp_path, tiny_config, tiny_dataset):
        trainer = Trainer(tiny_config, tiny_dataset, str(tmp_path), progress=False)
        trainer.state.online["encoder.stage1.block0.conv1.weight"].data[...] = np.nan

        with pytest.raises(NonFiniteLossError) as error:
            train_step(trainer.state, trainer.optimizer, trainer.batch_for_step(0), tiny_config, 0, trainer.schedule)
        assert error.value.step == 0
        assert trainer.optimizer.t == 0 and trainer.state.step == 0


class TestProbe:
    def test_evaluate_predictions(self):
        result = evaluate_predictions(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 3)

        assert result.per_class_iou == [pytest.approx(0.5), pytest.approx(2 / 3), None]
        assert result.miou == pytest.approx((0.5 + 2 / 3) / 2)
        assert result.acc == pytest.approx(0.75)
        assert result.fg_miou == pytest.approx(2 / 3)
        assert result.row("x")[-1] == "NA"
        assert result.notes

    def test_one_hot_features_are_separable(self, rng):
        labels = rng.integers(0, 3, size=(4, 8, 8))
        features = np.moveaxis(np.eye(3, dtype=np.float32)[labels], -1, 1)
        config = ProbeConfig(epochs=50, lr=0.1, num_classes=3)

        result = fit_probe(features, labels, features, labels, config)
        assert result.miou == pytest.approx(1.0)
        assert result.acc == pytest.approx(1.0)

    def test_invalid_config(self):
        with pytest.raises(ParameterError):
            ProbeConfig(eval_fraction=1.0)

    def test_linear_probe_on_random_model(self, tiny_config, tiny_dataset):
        config = ProbeConfig(epochs=2, height=32, width=64, num_classes=NUM_CLASSES)
        result = linear_probe(init_state(tiny_config.model_config), tiny_dataset, config)

        assert len(result.per_class_iou) == NUM_CLASSES
        assert 0.0 <= result.miou <= 1.0 and 0.0 <= result.acc <= 1.0

    def test_csv(self, tmp_path):
        result = ProbeResult([1.0, None], 1.0, 1.0, 0.0)
        path = write_probe_csv([("scratch", result)], str(tmp_path / "probe.csv"), 2)

        with open(path, newline="") as file:
            rows = list(csv.reader(file))
        assert rows == [["tag", "miou", "acc", "fg_miou", "iou_0", "iou_1"], ["scratch", "1.0", "1.0", "0.0", "1.0", "NA"]]


class TestAblationGrid:
    def test_rows_and_csv(self, tmp_path, tiny_config, tiny_dataset):
        probe = ProbeConfig(epochs=1, height=32, width=64, num_classes=NUM_CLASSES)
        rows = run_ablation_grid(tiny_config, tiny_dataset, probe, str(tmp_path), rows=["dense_only"], progress=False)

        assert [row.name for row in rows] == ["scratch", "dense_only"]
        assert rows[1].ablate == ("pool", "topdown", "lateral")
        with open(tmp_path / ABLATION_NAME, newline="") as file:
            assert len(list(csv.reader(file))) == 3

    def test_unknown_row(self, tmp_path, tiny_config, tiny_dataset):
        with pytest.raises(ParameterError):
            run_ablation_grid(tiny_config, tiny_dataset, ProbeConfig(), str(tmp_path), rows=["nothing"])
