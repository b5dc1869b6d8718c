from dataclasses import replace

import numpy as np
import pytest

from library.cropping import SubcropSampler
from library.exceptions import ParameterError
from library.flow import FlowField
from library.geometry import identity_affine
from library.losses import PreparedBatch, dense_loss, masked_pixel_loss, pooled_loss, symmetrized_total
from library.network import init_state, predict
from library.tensor import Tensor
from library.trainer import prepare_batch


def identity(projection, mask=None):
    return projection


def static_batch(rng, n=1, height=32, width=64):
    views = rng.random((n, 3, height, width)).astype(np.float32)
    augs = [identity_affine(height, width) for _ in range(n)]
    flows = [FlowField.zeros(height, width) for _ in range(n)]
    occlusion = [np.zeros((height, width), dtype=bool) for _ in range(n)]
    return PreparedBatch(views, views.copy(), augs, augs, flows, flows, occlusion, occlusion)


@pytest.fixture
def batch(rng, tiny_config, tiny_dataset):
    sampler = SubcropSampler(tiny_config.num_subcrops, jitter=0.0)
    return prepare_batch([tiny_dataset[0], tiny_dataset[1]], tiny_config, rng, sampler)


class TestPixelLoss:
    def test_masked_values_never_reach_the_loss(self):
        online = Tensor(np.zeros((1, 2, 2, 2), dtype=np.float32))
        target = np.zeros((1, 2, 2, 2), dtype=np.float32)
        target[0, :, 0, 0] = 1.0
        target[0, :, 1, 1] = 1e6
        mask = np.ones((1, 1, 2, 2), dtype=bool)
        mask[0, 0, 1, 1] = False

        loss = masked_pixel_loss(online, Tensor(target), mask)
        assert loss.item() == pytest.approx(2.0 / 3.0)


class TestDenseLoss:
    def test_identical_projections_give_zero(self, rng):
        projection = Tensor(rng.normal(size=(1, 4, 8, 16)).astype(np.float32))
        augs = [identity_affine(32, 64)]
        loss, stats, mask = dense_loss(
            projection, projection, augs, augs, [FlowField.zeros(32, 64)], [np.zeros((32, 64), dtype=bool)]
        )

        assert loss.item() == pytest.approx(0.0, abs=1e-6)
        assert mask.shape == (1, 1, 32, 64)
        assert stats.valid_frac > 0.9 and stats.occ_frac == 0.0

    def test_occluded_pixels_are_excluded(self, rng):
        projection = Tensor(rng.normal(size=(1, 4, 8, 16)).astype(np.float32))
        augs = [identity_affine(32, 64)]
        occlusion = np.zeros((32, 64), dtype=bool)
        occlusion[:, :32] = True
        _, stats, mask = dense_loss(projection, projection, augs, augs, [FlowField.zeros(32, 64)], [occlusion])

        assert stats.occluded_pixels == 32 * 32
        assert not mask[0, 0, :, :32].any()

    def test_masked_pixels_never_reach_the_loss_through_the_predictor(self, rng, tiny_config):
        state = init_state(tiny_config.model_config)
        online_weights = state.online_weights("train")

        def predictor(projection, mask=None):
            return predict(online_weights, projection, mask)

        height, width = 16, 32
        online = rng.normal(size=(2, 8, height, width)).astype(np.float32)
        offline = rng.normal(size=(2, 8, height, width)).astype(np.float32)
        augs = [identity_affine(height, width)] * 2
        flows = [FlowField.zeros(height, width)] * 2
        occlusion = np.zeros((height, width), dtype=bool)
        occlusion[:, : width // 2] = True

        def loss_of(online, offline):
            loss, _, mask = dense_loss(
                Tensor(online), Tensor(offline), augs, augs, flows, [occlusion] * 2, predictor=predictor
            )
            return loss.item(), mask

        before, mask = loss_of(online, offline)
        hidden = np.broadcast_to(~mask, online.shape)
        online[hidden] = 50.0
        offline[hidden] = -50.0
        after, _ = loss_of(online, offline)

        assert hidden.any() and mask.sum() > 2
        assert after == before

    def test_batch_order_does_not_matter(self, rng, batch, tiny_config):
        online_weights = init_state(tiny_config.model_config).online_weights("train")

        def predictor(projection, mask=None):
            return predict(online_weights, projection, mask)

        online = rng.normal(size=(2, 8, 8, 16)).astype(np.float32)
        offline = rng.normal(size=(2, 8, 8, 16)).astype(np.float32)

        def loss_in(order):
            loss, stats, _ = dense_loss(
                Tensor(online[order]),
                Tensor(offline[order]),
                [batch.aug_t[i] for i in order],
                [batch.aug_t_plus[i] for i in order],
                [batch.flow_fwd[i] for i in order],
                [batch.occ_fwd[i] for i in order],
                predictor=predictor,
            )
            return loss.item(), stats.valid_pixels

        straight, valid = loss_in([0, 1])
        permuted, valid_permuted = loss_in([1, 0])
        assert valid == valid_permuted > 0
        assert permuted == pytest.approx(straight, rel=1e-6)

    def test_fully_occluded_is_constant_zero(self, rng):
        online = Tensor(rng.normal(size=(1, 4, 8, 16)).astype(np.float32), requires_grad=True)
        offline = Tensor(rng.normal(size=(1, 4, 8, 16)).astype(np.float32))
        augs = [identity_affine(32, 64)]
        loss, stats, _ = dense_loss(
            online, offline, augs, augs, [FlowField.zeros(32, 64)], [np.ones((32, 64), dtype=bool)]
        )

        assert loss.item() == 0.0 and not loss.requires_grad
        assert stats.valid_pixels == 0


class TestPooledLoss:
    def test_no_pairs(self):
        assert pooled_loss(Tensor(np.zeros((0, 8), dtype=np.float32)), Tensor(np.zeros((0, 8), dtype=np.float32))).item() == 0.0

    def test_identical_vectors(self, rng):
        vectors = Tensor(rng.normal(size=(3, 8)).astype(np.float32))
        assert pooled_loss(vectors, vectors).item() == pytest.approx(0.0, abs=1e-6)

    def test_opposite_vectors(self, rng):
        vectors = rng.normal(size=(2, 3)).astype(np.float32)
        assert pooled_loss(Tensor(vectors), Tensor(-vectors)).item() == pytest.approx(4.0, rel=1e-5)

    def test_maps_are_pooled_first(self, rng):
        maps = rng.normal(size=(2, 8, 2, 2)).astype(np.float32)
        pooled = maps.mean(axis=(2, 3))
        assert pooled_loss(Tensor(maps), Tensor(pooled)).item() == pytest.approx(0.0, abs=1e-6)


class TestSymmetrizedTotal:
    def test_tied_branches_on_a_static_pair(self, rng, tiny_config):
        state = init_state(tiny_config.model_config)
        _, report = symmetrized_total(
            state, static_batch(rng), use_pool=False, online_mode="eval", predictor=identity
        )

        assert report.dense == pytest.approx(0.0, abs=1e-6)
        assert report.flags == []

    def test_terms_add_up(self, batch, tiny_config):
        state = init_state(tiny_config.model_config)
        total, report = symmetrized_total(state, batch)

        assert report.pairs == batch.pairs > 0
        assert np.isfinite(report.total)
        assert report.total == pytest.approx(report.dense + report.pooled, rel=1e-5)
        assert total.requires_grad

    def test_pool_ablated(self, batch, tiny_config):
        _, report = symmetrized_total(init_state(tiny_config.model_config), batch, use_pool=False)
        assert report.pooled == 0.0 and report.pairs == 0
        assert report.total == pytest.approx(report.dense)

    def test_dense_ablated(self, batch, tiny_config):
        _, report = symmetrized_total(init_state(tiny_config.model_config), batch, use_dense=False)
        assert report.dense == 0.0 and report.valid_frac == 0.0
        assert report.total == pytest.approx(report.pooled)

    def test_missing_backward_flow_is_one_directional(self, batch, tiny_config):
        one_way = replace(batch, flow_bwd=None, occ_bwd=None)
        _, report = symmetrized_total(init_state(tiny_config.model_config), one_way)
        assert "one-directional" in report.flags

    def test_no_subcrops_is_flagged(self, batch, tiny_config):
        empty = replace(batch, sub_t=batch.sub_t[:0], sub_t_plus=batch.sub_t_plus[:0])
        _, report = symmetrized_total(init_state(tiny_config.model_config), empty)
        assert "no-subcrop-pairs" in report.flags and report.pooled == 0.0

    def test_swap_needs_backward_flow(self, batch):
        with pytest.raises(ParameterError):
            replace(batch, flow_bwd=None).swapped()

    def test_swap_exchanges_frames(self, batch):
        swapped = batch.swapped()
        assert swapped.view_t is batch.view_t_plus
        assert swapped.flow_fwd is batch.flow_bwd
        assert swapped.sub_t is batch.sub_t_plus

    def test_swapping_frames_leaves_the_total_unchanged(self, batch, tiny_config):
        state = init_state(tiny_config.model_config)
        _, forward = symmetrized_total(state, batch)
        _, backward = symmetrized_total(state, batch.swapped())

        assert backward.total == pytest.approx(forward.total, rel=1e-6)
        assert backward.dense == pytest.approx(forward.dense, rel=1e-6)
        assert backward.pooled == pytest.approx(forward.pooled, rel=1e-6)
