import numpy as np
import pytest

from library.exceptions import DimensionError, FormatError, ParameterError
from library.network import (
    ModelConfig,
    build_parameters,
    dense_features,
    ema_update,
    encode,
    init_state,
    load_checkpoint,
    momentum_at,
    predict,
    project_dense,
    project_pool,
    save_checkpoint,
    state_arrays,
    state_from_arrays,
)
from library.tensor import Tensor

TINY = ModelConfig(widths=(8, 16, 16, 16), proj_hidden=8, proj_dim=8)
DIGEST = "ab" * 32


@pytest.fixture
def images(rng):
    return Tensor(rng.random((2, 3, 32, 64)).astype(np.float32))


class TestParameters:
    def test_same_seed_same_weights(self):
        first, _ = build_parameters(TINY)
        second, _ = build_parameters(TINY)
        assert all(np.array_equal(first[name], second[name]) for name in first)

    def test_no_lateral_parameters_without_lateral(self):
        params, _ = build_parameters(ModelConfig(widths=(8, 16, 16, 16), lateral=False))
        assert not any(".lateral" in name for name in params)
        assert any(name.startswith("sdm.block0.g.") for name in params)

    def test_dilated_trunk_has_no_decoder(self):
        config = ModelConfig(widths=(8, 16, 16, 16), topdown=False, lateral=False)
        params, _ = build_parameters(config)

        assert config.dilated
        assert not any(name.startswith("sdm.") for name in params)

    def test_offline_branch_has_no_predictors(self):
        state = init_state(TINY)
        assert not any(name.startswith("predictor.") for name in state.offline)
        assert set(state.offline) == {name for name in state.online if not name.startswith("predictor.")}

    def test_invalid_sdm_blocks(self):
        with pytest.raises(ParameterError):
            ModelConfig(widths=(8, 16), sdm_blocks=2)

    def test_invalid_lateral_layers(self):
        with pytest.raises(ParameterError):
            ModelConfig(lateral_layers=3)


class TestForward:
    def test_pyramid_shapes(self, images):
        state = init_state(TINY)
        pyramid = encode(TINY, state.online_weights(), images)
        assert [level.shape for level in pyramid] == [
            (2, 8, 16, 32),
            (2, 16, 8, 16),
            (2, 16, 4, 8),
            (2, 16, 2, 4),
        ]

    def test_dilated_pyramid_keeps_resolution(self, images):
        config = ModelConfig(widths=(8, 16, 16, 16), proj_hidden=8, proj_dim=8, topdown=False, lateral=False)
        pyramid = encode(config, init_state(config).online_weights(), images)
        assert [level.shape[2:] for level in pyramid] == [(16, 32), (8, 16), (8, 16), (8, 16)]

    @pytest.mark.parametrize("topdown, lateral", [(True, True), (True, False), (False, True), (False, False)])
    def test_dense_features_at_quarter_resolution(self, images, topdown, lateral):
        config = ModelConfig(widths=(8, 16, 16, 16), proj_hidden=8, proj_dim=8, topdown=topdown, lateral=lateral)
        features, _ = dense_features(config, init_state(config).online_weights(), images)
        assert features.shape == (2, 16, 8, 16)

    def test_lateral_layers_two(self, images):
        config = ModelConfig(widths=(8, 16, 16, 16), proj_hidden=8, proj_dim=8, lateral_layers=2)
        state = init_state(config)
        assert "sdm.block0.lateral.conv2.weight" in state.online
        features, _ = dense_features(config, state.online_weights(), images)
        assert features.shape == (2, 16, 8, 16)

    def test_input_must_be_divisible(self, rng):
        state = init_state(TINY)
        with pytest.raises(DimensionError):
            encode(TINY, state.online_weights(), Tensor(rng.random((1, 3, 24, 64))))

    def test_heads(self, images):
        state = init_state(TINY)
        weights = state.online_weights()
        features, pyramid = dense_features(TINY, weights, images)

        dense = project_dense(weights, features)
        pooled = project_pool(weights, pyramid[-1])
        assert dense.shape == (2, 8, 8, 16)
        assert pooled.shape == (2, 8)
        assert predict(weights, dense).shape == dense.shape
        assert predict(weights, pooled).shape == pooled.shape

    def test_single_vector_head_uses_running_statistics(self, rng):
        state = init_state(TINY)
        out = predict(state.online_weights(), Tensor(rng.normal(size=(1, 8)).astype(np.float32)))
        assert out.shape == (1, 8)

    def test_offline_branch_leaves_buffers_alone(self, images):
        state = init_state(TINY)
        before = {name: value.copy() for name, value in state.offline_buffers.items()}
        dense_features(TINY, state.offline_weights(), images)
        assert all(np.array_equal(before[name], state.offline_buffers[name]) for name in before)

    def test_online_train_mode_updates_buffers(self, images):
        state = init_state(TINY)
        dense_features(TINY, state.online_weights("train"), images)
        assert not np.array_equal(state.online_buffers["encoder.stage1.block0.bn1.running_mean"], 0)


class TestMovingAverage:
    def test_momentum_endpoints(self):
        assert momentum_at(0, 100, 0.996) == pytest.approx(0.996)
        assert momentum_at(50, 100, 0.996) == pytest.approx(0.998)
        assert momentum_at(100, 100, 0.996) == 1.0

    def test_update_moves_toward_online(self):
        state = init_state(TINY, base_momentum=0.5)
        name = "encoder.stage1.block0.conv1.weight"
        state.offline[name][...] = 0.0
        state.online[name].data[...] = 1.0

        assert ema_update(state, 0, 10) == 0.5
        np.testing.assert_array_equal(state.offline[name], 0.5)

    def test_step_outside_schedule(self):
        with pytest.raises(ParameterError):
            ema_update(init_state(TINY), 11, 10)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        state = init_state(TINY)
        state.offline["projector.pool.fc2.bias"] += 0.25
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, state_arrays(state), DIGEST, 17)

        arrays, digest, step = load_checkpoint(path)
        restored = state_from_arrays(TINY, arrays, step)

        assert (digest, step) == (DIGEST, 17)
        assert open(path, "rb").read(4) == b"DPCK"
        for name, tensor in state.online.items():
            np.testing.assert_array_equal(restored.online[name].data, tensor.data)
        np.testing.assert_array_equal(restored.offline["projector.pool.fc2.bias"], 0.25)

    def test_scalar_arrays(self, tmp_path):
        path = str(tmp_path / "scalar.ckpt")
        save_checkpoint(path, {"adam_t": np.array(3.0, dtype=np.float32)}, DIGEST, 0)
        arrays, _, _ = load_checkpoint(path)
        assert arrays["adam_t"].shape == () and float(arrays["adam_t"]) == 3.0

    def test_truncated(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), state_arrays(init_state(TINY)), DIGEST, 1)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_architecture_mismatch(self, tmp_path):
        arrays = state_arrays(init_state(TINY))
        other = ModelConfig(widths=(8, 16, 16, 16), proj_hidden=8, proj_dim=8, lateral=False)
        with pytest.raises(FormatError):
            state_from_arrays(other, arrays, 0)

    def test_digest_must_be_sha256(self, tmp_path):
        with pytest.raises(ParameterError):
            save_checkpoint(str(tmp_path / "x.ckpt"), {}, "abcd", 0)
