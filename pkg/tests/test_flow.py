import numpy as np
import pytest

from library.cropping import CropSpec
from library.exceptions import CropError, DimensionError, ParameterError
from library.flow import FlowField, compose_flow, crop_flow, occlusion_mask, scale_flow, warp_by_flow
from library.tensor import Tensor


class TestFlowField:
    def test_rejects_wrong_shape(self):
        with pytest.raises(DimensionError):
            FlowField(np.zeros((4, 4, 3)))

    def test_rejects_non_finite(self):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(ParameterError):
            FlowField(data)

    def test_constant(self):
        flow = FlowField.constant(3, 4, 1.5, -2.0)
        assert (flow.height, flow.width) == (3, 4)
        np.testing.assert_array_equal(flow.data[..., 0], 1.5)
        np.testing.assert_array_equal(flow.data[..., 1], -2.0)


class TestWarp:
    def test_zero_flow_is_identity(self, rng):
        features = Tensor(rng.normal(size=(2, 3, 5, 6)).astype(np.float32))
        warped, valid = warp_by_flow(features, FlowField.zeros(5, 6))
        np.testing.assert_array_equal(warped.data, features.data)
        assert valid.all()

    def test_integer_shift_reads_neighbor(self, rng):
        features = rng.normal(size=(1, 2, 4, 6)).astype(np.float32)
        warped, valid = warp_by_flow(Tensor(features), [FlowField.constant(4, 6, 1.0, 0.0)])

        np.testing.assert_array_equal(warped.data[..., :-1], features[..., 1:])
        assert not valid[..., -1].any() and valid[..., :-1].all()
        np.testing.assert_array_equal(warped.data[..., -1], 0)

    def test_spatial_mismatch_raises(self):
        with pytest.raises(DimensionError):
            warp_by_flow(Tensor(np.zeros((1, 1, 4, 4))), FlowField.zeros(8, 8))


class TestOcclusion:
    def test_zero_flows_occlude_nothing(self):
        assert not occlusion_mask(FlowField.zeros(6, 8), FlowField.zeros(6, 8)).any()

    def test_consistent_shift_occludes_only_the_leaving_band(self):
        forward = FlowField.constant(6, 8, 2.0, 0.0)
        backward = FlowField.constant(6, 8, -2.0, 0.0)
        mask = occlusion_mask(forward, backward)

        assert mask[:, -2:].all()
        assert not mask[:, :-2].any()

    def test_inconsistent_flows_are_occluded(self):
        mask = occlusion_mask(FlowField.constant(6, 8, 2.0, 0.0), FlowField.zeros(6, 8))
        assert mask.all()

    def test_negative_threshold_raises(self):
        with pytest.raises(ParameterError):
            occlusion_mask(FlowField.zeros(2, 2), FlowField.zeros(2, 2), alpha1=-0.1)


class TestResample:
    def test_scale_flow_rescales_displacements(self):
        scaled = scale_flow(FlowField.constant(4, 6, 1.0, 2.0), 8, 12)
        assert (scaled.height, scaled.width) == (8, 12)
        np.testing.assert_allclose(scaled.data[..., 0], 2.0, atol=1e-6)
        np.testing.assert_allclose(scaled.data[..., 1], 4.0, atol=1e-6)

    def test_full_crop_at_native_size_is_identity(self, rng):
        flow = FlowField(rng.normal(size=(6, 8, 2)).astype(np.float32))
        cropped = crop_flow(flow, CropSpec.full(6, 8), 6, 8)
        np.testing.assert_allclose(cropped.data, flow.data, atol=1e-6)

    def test_crop_flow_scales_to_output(self):
        flow = FlowField.constant(8, 8, 1.0, -1.0)
        cropped = crop_flow(flow, CropSpec(0.0, 0.0, 4.0, 4.0, 8, 8), 8, 8)
        np.testing.assert_allclose(cropped.data[..., 0], 2.0, atol=1e-6)
        np.testing.assert_allclose(cropped.data[..., 1], -2.0, atol=1e-6)

    def test_crop_flow_folds_target_offset(self):
        flow = FlowField.zeros(8, 10)
        crop = CropSpec(3.0, 1.0, 4.0, 4.0, 8, 10)
        target = CropSpec(1.0, 1.0, 4.0, 4.0, 8, 10)
        cropped = crop_flow(flow, crop, 4, 4, target=target)
        np.testing.assert_allclose(cropped.data[..., 0], 2.0)
        np.testing.assert_allclose(cropped.data[..., 1], 0.0)

    def test_crop_flow_rejects_unequal_target(self):
        with pytest.raises(CropError):
            crop_flow(
                FlowField.zeros(8, 8),
                CropSpec(0.0, 0.0, 4.0, 4.0, 8, 8),
                4,
                4,
                target=CropSpec(0.0, 0.0, 5.0, 4.0, 8, 8),
            )

    def test_compose_constant_flows(self):
        composed = compose_flow(FlowField.constant(6, 8, 1.0, 0.0), FlowField.constant(6, 8, 0.0, 1.0))
        np.testing.assert_allclose(composed.data[:4, :, 0], 1.0)
        np.testing.assert_allclose(composed.data[..., 1], 1.0)
