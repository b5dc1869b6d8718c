import numpy as np
from scipy import ndimage

from library.cropping import SubcropSampler, grid_cells, grid_side
from library.flow import occlusion_mask, warp_by_flow
from library.geometry import AffineConfig, PhotometricConfig
from library.losses import symmetrized_total
from library.network import ModelConfig, init_state
from library.synth import SynthConfig, SyntheticDataset, generate_scenes, render_pair
from library.tensor import Tensor
from library.trainer import TrainConfig, prepare_batch, step_rng

from suites import BaseSuite, CheckResult


def boundary_band(mask: np.ndarray) -> np.ndarray:
    """
    Pixels within one pixel of a boundary of `mask`.
    """

    structure = np.ones((3, 3), dtype=bool)
    return ndimage.binary_dilation(mask, structure) & ~ndimage.binary_erosion(mask, structure, border_value=1)


class WarpSuite(BaseSuite):
    def __init__(self) -> None:
        super().__init__(
            id="warp",
            title="Warping and occlusion",
            description="Ground-truth flow reconstructs frames, forward-backward occlusion matches the "
            "renderer, and identical views give a zero loss.",
        )

    def reconstruction(self, dataset: SyntheticDataset) -> tuple[float, float]:
        """
        Mean absolute error of frame t against frame t+dt warped back by the flow
        on visible pixels, and the IoU between the forward-backward occlusion
        mask and the rendered occlusion away from mask boundaries.
        """

        options = self.config.options
        error_sum, error_count = 0.0, 0
        intersection, union = 0, 0

        for index in range(len(dataset)):
            sample = dataset[index]
            warped, valid = warp_by_flow(Tensor(sample.frame_t_plus[None]), sample.flow_fwd)
            visible = (valid[0, 0] > 0) & ~sample.occlusion_fwd

            difference = np.abs(warped.data[0] - sample.frame_t)[:, visible]
            error_sum += float(difference.sum())
            error_count += difference.size

            estimated = occlusion_mask(
                sample.flow_fwd, sample.flow_bwd, options.get("alpha1", 0.1), options.get("alpha2", 0.5)
            )
            keep = ~boundary_band(sample.occlusion_fwd)
            intersection += int((estimated & sample.occlusion_fwd & keep).sum())
            union += int(((estimated | sample.occlusion_fwd) & keep).sum())

        mae = error_sum / error_count if error_count else 0.0
        iou = intersection / union if union else 1.0
        return mae, iou

    def loss_zero(self, seed: int) -> float:
        """
        Tied weights, identity predictors and augmentations on a static pair.
        """

        config = TrainConfig(
            seed=seed,
            batch_size=1,
            global_size=(32, 64),
            subcrop_size=16,
            num_subcrops=3,
            subcrop_jitter=0.0,
            affine=AffineConfig(scale_range=(1.0, 1.0), rotation_range=(0.0, 0.0)),
            photometric=PhotometricConfig(
                brightness_range=(0.0, 0.0), contrast_range=(1.0, 1.0), blur_probability=0.0
            ),
            model=ModelConfig(widths=(8, 16, 16, 16), proj_hidden=8, proj_dim=8),
        )
        scenes, _ = generate_scenes(SynthConfig(scenes=1, height=64, width=128, seed=seed))
        sample = render_pair(scenes[0], 0)
        sampler = SubcropSampler(3, jitter=0.0)

        batch = prepare_batch([sample], config, step_rng(seed, 0), sampler)
        total, _ = symmetrized_total(
            init_state(config.model_config), batch, online_mode="eval", predictor=lambda x, mask=None: x
        )
        return abs(total.item())

    def run(self) -> list[CheckResult]:
        options = self.config.options
        checks = []

        for seed in self.config.seeds:
            dataset = SyntheticDataset.from_config(
                SynthConfig(
                    scenes=options.get("scenes", 50),
                    height=options.get("height", 64),
                    width=options.get("width", 128),
                    seed=seed,
                )
            )
            mae, iou = self.reconstruction(dataset)
            checks.append(self.check(f"warp-reconstruction[seed={seed}]", mae))
            checks.append(
                self.check(
                    f"occlusion-iou[seed={seed}]",
                    1 - iou,
                    tolerance=1 - options.get("min_iou", 0.95),
                    detail=f"iou={iou:.4f}",
                )
            )
            checks.append(
                self.check(
                    f"dense-loss-zero[seed={seed}]",
                    self.loss_zero(seed),
                    tolerance=options.get("loss_zero_tolerance", 1e-10),
                )
            )

        side = grid_side(512, 512, 0.05, 0.3)
        checks.append(self.check("grid-side", abs(side - 512 * np.sqrt(0.175)), tolerance=1e-9))
        checks.append(self.expect("grid-cells", len(grid_cells(512, 512, 0.05, 0.3)) == 9, "3x3 grid"))

        return checks


def setup():
    return WarpSuite()
