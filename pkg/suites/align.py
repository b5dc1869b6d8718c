import numpy as np

from library.cropping import CropSpec, grid_cells, sample_subcrop_pair
from library.synth import SynthConfig, generate_scenes, render_frame, render_pair

from suites import BaseSuite, CheckResult


def crop_pixels(crop: CropSpec) -> np.ndarray:
    """
    Pixels whose centers fall inside `crop`.
    """

    cols = np.arange(crop.source_w) + 0.5
    rows = np.arange(crop.source_h) + 0.5
    inside_x = (cols >= crop.x) & (cols < crop.x + crop.w)
    inside_y = (rows >= crop.y) & (rows < crop.y + crop.h)
    return inside_y[:, None] & inside_x[None, :]


def object_iou(obj: np.ndarray, crop: CropSpec) -> float:
    rect = crop_pixels(crop)
    union = int((obj | rect).sum())
    return int((obj & rect).sum()) / union if union else 0.0


class AlignSuite(BaseSuite):
    def __init__(self) -> None:
        super().__init__(
            id="align",
            title="Subcrop alignment",
            description="With ground-truth flow and no jitter, the frame t subcrop covers the object "
            "under the frame t+dt subcrop center better than a random crop of the same size.",
        )

    def trials(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """
        Object IoU of the flow-informed frame t crop and of a same-size random
        crop, one entry per trial whose frame t+dt center lands on an object
        still visible in frame t.
        """

        options = self.config.options
        wanted = options.get("trials", 1000)
        area_range = tuple(options.get("area_range", (0.05, 0.3)))

        scenes, dts = generate_scenes(
            SynthConfig(
                scenes=options.get("scenes", 100),
                height=options.get("height", 64),
                width=options.get("width", 128),
                seed=seed,
            )
        )
        rendered = {}
        rng = np.random.default_rng(seed)
        aligned, random = [], []

        for attempt in range(wanted * options.get("max_attempts_factor", 50)):
            if len(aligned) == wanted:
                break

            index = attempt % len(scenes)
            if index not in rendered:
                scene = scenes[index]
                flow = render_pair(scene, dts[index]).flow_fwd
                owner_t = render_frame(scene, 0)[2]
                owner_t_plus = render_frame(scene, dts[index])[2]
                rendered[index] = (flow, owner_t, owner_t_plus)
            flow, owner_t, owner_t_plus = rendered[index]

            cells = grid_cells(flow.height, flow.width, *area_range)
            cell = cells[int(rng.integers(len(cells)))]
            pair = sample_subcrop_pair(rng, cell, flow, jitter=0.0, area_range=area_range)
            if pair is None:
                continue

            u, v = pair.center_t_plus
            target = owner_t_plus[min(int(v), flow.height - 1), min(int(u), flow.width - 1)]
            obj = owner_t == target
            if target < 0 or not obj.any():
                continue

            crop = pair.crop_t
            x = float(rng.uniform(0, crop.source_w - crop.w))
            y = float(rng.uniform(0, crop.source_h - crop.h))
            baseline = CropSpec(x, y, crop.w, crop.h, crop.source_h, crop.source_w)

            aligned.append(object_iou(obj, crop))
            random.append(object_iou(obj, baseline))

        return np.asarray(aligned), np.asarray(random)

    def run(self) -> list[CheckResult]:
        options = self.config.options
        wanted = options.get("trials", 1000)
        min_separation = options.get("min_separation", 5.0)
        checks = []

        for seed in self.config.seeds:
            aligned, random = self.trials(seed)
            checks.append(self.expect(f"trials[seed={seed}]", len(aligned) == wanted, f"{len(aligned)} of {wanted}"))
            if len(aligned) < 2:
                continue

            difference = aligned - random
            error = difference.std(ddof=1) / np.sqrt(len(difference))
            separation = difference.mean() / error if error > 0 else float("inf")
            checks.append(
                self.expect(
                    f"alignment[seed={seed}]",
                    separation >= min_separation,
                    f"aligned={aligned.mean():.4f} random={random.mean():.4f} separation={separation:.1f}",
                )
            )

        return checks


def setup():
    return AlignSuite()
