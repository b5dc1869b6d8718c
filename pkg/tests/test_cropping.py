import math

import numpy as np
import pytest

from library.cropping import (
    CropSpec,
    SubcropSampler,
    crop_grid,
    extract_resize,
    grid_cells,
    grid_side,
    jitter_crop,
    sample_global_crop_pair,
    sample_subcrop_pair,
)
from library.exceptions import CropError, ParameterError
from library.flow import FlowField


class TestCropSpec:
    def test_out_of_bounds_raises(self):
        with pytest.raises(CropError):
            CropSpec(5.0, 0.0, 6.0, 4.0, 8, 10)

    def test_sub_pixel_crop_raises(self):
        with pytest.raises(CropError):
            CropSpec(0.0, 0.0, 0.5, 4.0, 8, 8)

    def test_shifted_to_stays_inside(self):
        crop = CropSpec(0.0, 0.0, 4.0, 4.0, 8, 8).shifted_to(7.5, 0.0)
        assert (crop.x, crop.y) == (4.0, 0.0)

    def test_jitter_keeps_size(self, rng):
        crop = CropSpec(2.0, 2.0, 4.0, 3.0, 8, 8)
        for _ in range(20):
            jittered = jitter_crop(rng, crop, 0.5)
            assert (jittered.w, jittered.h) == (4.0, 3.0)


class TestGlobalCrop:
    def test_area_and_aspect(self, rng):
        for _ in range(50):
            crop = sample_global_crop_pair(rng, 128, 256, (0.16, 0.45), 64, 128)
            assert 0.16 - 1e-9 <= crop.area_fraction <= 0.45 + 1e-9
            assert crop.w / crop.h == pytest.approx(2.0)

    def test_truncnorm_stays_in_range(self, rng):
        for _ in range(50):
            crop = sample_global_crop_pair(rng, 128, 256, (0.16, 0.45), 64, 128, area_mode="truncnorm")
            assert 0.16 - 1e-9 <= crop.area_fraction <= 0.45 + 1e-9

    def test_same_seed_same_crop(self):
        first = sample_global_crop_pair(np.random.default_rng(5), 64, 128, (0.2, 0.5), 32, 64)
        second = sample_global_crop_pair(np.random.default_rng(5), 64, 128, (0.2, 0.5), 32, 64)
        assert first == second

    @pytest.mark.parametrize("area_range", [(0.0, 0.5), (0.6, 0.5), (0.5, 1.5)])
    def test_invalid_area_range(self, rng, area_range):
        with pytest.raises(ParameterError):
            sample_global_crop_pair(rng, 64, 128, area_range, 32, 64)


class TestGrid:
    def test_grid_side(self):
        assert grid_side(512, 512, 0.05, 0.3) == pytest.approx(512 * math.sqrt(0.175))

    def test_three_by_three_cells(self):
        cells = grid_cells(512, 512, 0.05, 0.3)
        side = 512 * math.sqrt(0.175)

        assert len(cells) == 9
        assert [cell.index for cell in cells] == list(range(9))
        assert cells[-1].w == pytest.approx(512 - 2 * side)
        assert sum(cell.w * cell.h for cell in cells) == pytest.approx(512 * 512)

    def test_invalid_range(self):
        with pytest.raises(ParameterError):
            grid_cells(64, 64, 0.3, 0.05)


class TestSubcrops:
    def test_zero_flow_without_jitter_pairs_identical_crops(self, rng):
        cell = grid_cells(64, 128, 0.05, 0.3)[0]
        pair = sample_subcrop_pair(rng, cell, FlowField.zeros(64, 128), jitter=0.0)

        assert pair.crop_t == pair.crop_t_plus
        assert pair.center_t == pair.center_t_plus
        assert 0.05 - 1e-9 <= pair.area <= 0.3 + 1e-9

    def test_center_follows_flow(self, rng):
        cell = grid_cells(64, 128, 0.05, 0.3)[1]
        pair = sample_subcrop_pair(rng, cell, FlowField.constant(64, 128, 5.0, -3.0), jitter=0.0, attempts=50)

        u, v = pair.center_t_plus
        assert pair.center_t == pytest.approx((u - 5.0, v + 3.0))

    def test_center_inside_its_cell(self, rng):
        cells = grid_cells(64, 128, 0.05, 0.3)
        pair = sample_subcrop_pair(rng, cells[7], FlowField.zeros(64, 128), jitter=0.1)
        cell = cells[7]
        u, v = pair.center_t_plus
        assert cell.x <= u <= cell.x + cell.w and cell.y <= v <= cell.y + cell.h

    def test_flow_leaving_frame_is_rejected(self, rng):
        cell = grid_cells(32, 64, 0.05, 0.3)[0]
        assert sample_subcrop_pair(rng, cell, FlowField.constant(32, 64, 1000.0, 0.0), jitter=0.0) is None

    def test_sampler_uses_distinct_cells(self, rng):
        sampler = SubcropSampler(4, jitter=0.0)
        pairs = sampler.sample(rng, FlowField.zeros(64, 128))

        assert len(pairs) == 4
        assert len({pair.cell for pair in pairs}) == 4
        assert sampler.calls == 1 and sampler.rejections == 0

    def test_sampler_counts_rejections(self, rng):
        sampler = SubcropSampler(3, jitter=0.0, attempts=2)
        assert sampler.sample(rng, FlowField.constant(32, 64, 0.0, 1000.0)) == []
        assert sampler.rejections == 3

    def test_negative_count_raises(self):
        with pytest.raises(ParameterError):
            SubcropSampler(-1)


class TestResample:
    def test_full_crop_grid_hits_pixel_centers(self):
        grid = crop_grid(CropSpec.full(4, 6), 4, 6)
        np.testing.assert_array_equal(grid[3, 5], [5.0, 3.0])
        np.testing.assert_array_equal(grid[0, 0], [0.0, 0.0])

    def test_extract_full_crop_is_identity(self, rng):
        frame = rng.random((3, 8, 12)).astype(np.float32)
        np.testing.assert_allclose(extract_resize(frame, CropSpec.full(8, 12), 8, 12), frame, atol=1e-7)

    def test_extract_checks_source(self, rng):
        with pytest.raises(CropError):
            extract_resize(np.zeros((3, 8, 8)), CropSpec.full(8, 12), 4, 4)
