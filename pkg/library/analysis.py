"""
Why small subcrops of dense scenes behave like iconic images: the probability
that a subcrop is hit by an object compared with the probability that a random
pixel is, on a toy circle and on labeled datasets, plus the class distribution
shift that subcrop labeling induces.
"""

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from scipy import ndimage

from library import utils
from library.cropping import sample_global_crop_pair
from library.exceptions import ParameterError

AVERAGING = "probabilities averaged uniformly over subcrop areas"


class LabeledDataset(Protocol):
    def __len__(self) -> int:
        ...

    def labels(self, index: int) -> np.ndarray:
        ...


@dataclass(frozen=True)
class ToyConfig:
    height: int = 256
    width: int = 512
    radii: tuple[float, ...] = (10, 20, 40, 80)
    areas: tuple[float, ...] = (0.02, 0.04, 0.06, 0.08)
    threshold: float = 0.05


@dataclass(frozen=True)
class EmpiricalConfig:
    global_area_range: tuple[float, float] = (0.16, 0.45)
    global_crops: int = 2
    subcrop_area_range: tuple[float, float] = (0.02, 0.03)
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    n_subcrops: int = 1024
    n_bins: int = 10
    threshold: float = 0.05
    fg_threshold: float = 0.10
    foreground_classes: tuple[int, ...] = (1, 2, 3, 4, 5)
    background_classes: tuple[int, ...] = (0,)
    num_classes: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_subcrops < 1 or self.global_crops < 1 or self.n_bins < 1:
            raise ParameterError("n_subcrops, global_crops and n_bins must be positive.")
        if not 0 < self.subcrop_area_range[0] <= self.subcrop_area_range[1] <= 1:
            raise ParameterError(f"Subcrop area range must lie in (0, 1], got {self.subcrop_area_range}.")


@dataclass
class SubcropRecord:

    """
    One size condition: a circle radius in the toy simulation, a size-quantile
    bin in the empirical one.
    """

    descriptor: float
    subcrop_area: float
    hit_prob: float
    pixel_prob: float
    count: int = 1

    @property
    def ratio(self) -> float:
        return self.hit_prob / self.pixel_prob if self.pixel_prob > 0 else math.inf


@dataclass
class SubcropAnalysisResult:
    records: list[SubcropRecord]
    metadata: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)


@dataclass
class ClassShiftRecord:
    class_id: int
    pixel_freq: float
    subcrop_freq: float

    @property
    def relative_change(self) -> Optional[float]:
        if self.pixel_freq == 0:
            return None

        return (self.subcrop_freq - self.pixel_freq) / self.pixel_freq


def integral_image(mask: np.ndarray) -> np.ndarray:
    """
    Summed-area table with a zero first row and column, so the sum over rows
    `[y0, y1)` and columns `[x0, x1)` is `I[y1, x1] - I[y0, x1] - I[y1, x0] + I[y0, x0]`.
    Leading axes are kept.
    """

    table = np.zeros((*mask.shape[:-2], mask.shape[-2] + 1, mask.shape[-1] + 1), dtype=np.int64)
    table[..., 1:, 1:] = mask.astype(np.int64).cumsum(axis=-2).cumsum(axis=-1)
    return table


def box_sums(table: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """
    Sums over `(x0, y0, x1, y1)` integer boxes, for every leading slice of `table`.
    """

    x0, y0, x1, y1 = boxes.T
    return table[..., y1, x1] - table[..., y0, x1] - table[..., y1, x0] + table[..., y0, x0]


def circle_mask(height: int, width: int, radius: float) -> np.ndarray:
    """
    Pixels whose index lies within `radius` of pixel `(width // 2, height // 2)`.
    """

    ys, xs = np.ogrid[:height, :width]
    return (xs - width // 2) ** 2 + (ys - height // 2) ** 2 <= radius**2


def _subcrop_side(area: float, height: int, width: int) -> int:
    return min(max(int(round(math.sqrt(area * height * width))), 1), height, width)


def toy_subcrop_sim(
    height: int,
    width: int,
    radius: float,
    areas: Sequence[float] = (0.02, 0.04, 0.06, 0.08),
    threshold: float = 0.05,
) -> SubcropRecord:
    """
    Exhaustive grid integration for a centered circle.

    Every square subcrop of side `round(sqrt(A * H * W))` fully inside the frame,
    at every integer position, hits when the circle covers at least `threshold`
    of it. The hit probability is averaged over the subcrop areas; the pixel
    probability counts the circle pixels.

    Parameters
    ----------
    - `height`, `width` : int
    - `radius` : float
        Circle radius in pixels. `0.5` leaves a single pixel.
    - `areas` : Sequence[float]
        Subcrop areas as fractions of the frame.
    - `threshold` : float
    """

    if radius <= 0:
        raise ParameterError(f"Circle radius must be positive, got {radius}.")
    if not areas:
        raise ParameterError("At least one subcrop area is needed.")

    mask = circle_mask(height, width, radius)
    table = integral_image(mask)

    hits = []
    for area in areas:
        side = _subcrop_side(area, height, width)
        covered = (
            table[side:, side:] - table[:-side, side:] - table[side:, :-side] + table[:-side, :-side]
        )
        hits.append(float((covered >= threshold * side * side).mean()))

    return SubcropRecord(
        descriptor=float(radius),
        subcrop_area=float(np.mean(areas)),
        hit_prob=float(np.mean(hits)),
        pixel_prob=float(mask.sum() / (height * width)),
    )


def unreachable_areas(
    height: int, width: int, radius: float, areas: Sequence[float], threshold: float
) -> list[float]:
    """
    Subcrop areas a centered circle can never hit because it holds fewer pixels
    than `threshold` of the subcrop.
    """

    pixels = int(circle_mask(height, width, radius).sum())
    sides = [_subcrop_side(area, height, width) for area in areas]
    return [area for area, side in zip(areas, sides) if pixels < threshold * side * side]


def toy_sweep(config: ToyConfig, n_jobs: int = 1) -> SubcropAnalysisResult:
    st = time.perf_counter()
    records = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(toy_subcrop_sim)(config.height, config.width, radius, config.areas, config.threshold)
        for radius in config.radii
    )

    notes = []
    for radius in config.radii:
        missed = unreachable_areas(config.height, config.width, radius, config.areas, config.threshold)
        if missed:
            notes.append(f"radius {radius:g} is below the hit threshold for subcrop areas {missed}")

    tt = round(time.perf_counter() - st, 2)
    utils.log_time_metric("analysis", tt, title="toy")
    logger.info(f"Toy simulation over {len(config.radii)} radii finished in {tt} seconds.")

    return SubcropAnalysisResult(
        records=list(records),
        metadata={"kind": "toy", "averaging": AVERAGING, **utils.jsonable(asdict(config))},
        notes=notes,
    )


def _integer_box(x: float, y: float, w: float, h: float) -> tuple[int, int, int, int]:
    x0, y0 = int(round(x)), int(round(y))
    return x0, y0, max(int(round(x + w)), x0 + 1), max(int(round(y + h)), y0 + 1)


def sample_subcrop_boxes(
    rng: np.random.Generator, labels_shape: tuple[int, int], config: EmpiricalConfig
) -> tuple[list[tuple[int, int, int, int]], list[np.ndarray]]:
    """
    Emulate training: `global_crops` global crops per image and `n_subcrops`
    subcrops fully inside each, at integer positions.

    Returns
    -------
    `tuple[list[tuple[int, int, int, int]], list[np.ndarray]]` :
        The global crop boxes and, per global crop, an `(n_subcrops, 4)` array of
        `(x0, y0, x1, y1)` subcrop boxes.
    """

    height, width = labels_shape
    crops, subcrops = [], []

    for _ in range(config.global_crops):
        crop = sample_global_crop_pair(rng, height, width, config.global_area_range, height, width)
        x0, y0, x1, y1 = _integer_box(crop.x, crop.y, crop.w, crop.h)
        x1, y1 = min(x1, width), min(y1, height)
        cw, ch = x1 - x0, y1 - y0

        area = rng.uniform(*config.subcrop_area_range, size=config.n_subcrops) * cw * ch
        aspect = rng.uniform(*config.aspect_range, size=config.n_subcrops)
        w = np.clip(np.round(np.sqrt(area * aspect)), 1, cw).astype(np.int64)
        h = np.clip(np.round(np.sqrt(area / aspect)), 1, ch).astype(np.int64)
        sx = x0 + (rng.random(config.n_subcrops) * (cw - w + 1)).astype(np.int64)
        sy = y0 + (rng.random(config.n_subcrops) * (ch - h + 1)).astype(np.int64)

        crops.append((x0, y0, x1, y1))
        subcrops.append(np.stack([sx, sy, sx + w, sy + h], axis=1))

    return crops, subcrops


@dataclass
class _Instance:
    class_id: int
    size: float
    hit_prob: float
    pixel_prob: float


def _image_instances(labels: np.ndarray, config: EmpiricalConfig, seed: int) -> list[_Instance]:
    rng = np.random.default_rng([config.seed, seed])
    height, width = labels.shape

    masks, classes = [], []
    for class_id in config.foreground_classes:
        components, count = ndimage.label(labels == class_id)
        for component in range(1, count + 1):
            masks.append(components == component)
            classes.append(class_id)

    crops, subcrops = sample_subcrop_boxes(rng, labels.shape, config)
    if not masks:
        return []

    tables = integral_image(np.stack(masks))
    hits = np.zeros(len(masks))
    pixels = np.zeros(len(masks))

    for crop, boxes in zip(crops, subcrops):
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        covered = box_sums(tables, boxes)
        hits += (covered >= config.threshold * areas).mean(axis=1)

        x0, y0, x1, y1 = crop
        pixels += box_sums(tables, np.array([crop]))[:, 0] / ((x1 - x0) * (y1 - y0))

    total = height * width
    return [
        _Instance(class_id, float(mask.sum() / total), float(hit / len(crops)), float(pixel / len(crops)))
        for class_id, mask, hit, pixel in zip(classes, masks, hits, pixels)
    ]


def empirical_subcrop_sim(
    dataset: LabeledDataset, config: EmpiricalConfig, n_jobs: int = 1
) -> SubcropAnalysisResult:
    """
    Monte-Carlo subcrop and pixel probabilities for every foreground instance
    (connected component of a foreground class), aggregated into equal-count
    bins by instance size.

    Parameters
    ----------
    - `dataset` : LabeledDataset
        Anything with `__len__` and `labels(index)`.
    - `config` : EmpiricalConfig
    - `n_jobs` : int
        joblib worker count. Images are merged in index order.

    Returns
    -------
    `SubcropAnalysisResult` :
        One record per non-empty size bin, smallest objects first. The record
        descriptor is the mean object size as a fraction of the frame.
    """

    if len(dataset) == 0:
        raise ParameterError("The empirical simulation needs a non-empty dataset.")

    st = time.perf_counter()
    per_image = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_image_instances)(dataset.labels(index), config, index) for index in range(len(dataset))
    )
    instances = [instance for image in per_image for instance in image]

    notes = []
    seen = {instance.class_id for instance in instances}
    for class_id in config.foreground_classes:
        if class_id not in seen:
            notes.append(f"class {class_id} absent from every image")

    records = []
    if instances:
        order = np.argsort([instance.size for instance in instances], kind="stable")
        for chosen in np.array_split(order, min(config.n_bins, len(order))):
            members = [instances[index] for index in chosen]
            records.append(
                SubcropRecord(
                    descriptor=float(np.mean([member.size for member in members])),
                    subcrop_area=float(np.mean(config.subcrop_area_range)),
                    hit_prob=float(np.mean([member.hit_prob for member in members])),
                    pixel_prob=float(np.mean([member.pixel_prob for member in members])),
                    count=len(members),
                )
            )
    else:
        notes.append("no foreground instance found")

    tt = round(time.perf_counter() - st, 2)
    utils.log_time_metric("analysis", tt, title="empirical")
    logger.info(f"Empirical simulation over {len(dataset)} image(s), {len(instances)} instance(s) finished in {tt} seconds.")
    for note in notes:
        logger.warning(f"Empirical simulation: {note}.")

    return SubcropAnalysisResult(
        records=records,
        metadata={"kind": "empirical", "binning": "equal-count size quantiles", **utils.jsonable(asdict(config))},
        notes=notes,
    )


def _image_class_counts(labels: np.ndarray, config: EmpiricalConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([config.seed, seed])
    classes = np.arange(config.num_classes)
    tables = integral_image(labels[None] == classes[:, None, None])
    background = [index for index in classes if index in config.background_classes]
    foreground = [index for index in classes if index not in config.background_classes]

    pixel_counts = np.zeros(config.num_classes, dtype=np.int64)
    subcrop_counts = np.zeros(config.num_classes, dtype=np.int64)

    crops, subcrops = sample_subcrop_boxes(rng, labels.shape, config)
    for crop, boxes in zip(crops, subcrops):
        pixel_counts += box_sums(tables, np.array([crop]))[:, 0]

        counts = box_sums(tables, boxes)
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        fg_share = counts[foreground].sum(axis=0) / areas if foreground else np.zeros(len(boxes))

        fg_label = np.asarray(foreground)[counts[foreground].argmax(axis=0)] if foreground else None
        bg_label = np.asarray(background)[counts[background].argmax(axis=0)] if background else None

        if fg_label is None:
            assigned = bg_label
        elif bg_label is None:
            assigned = fg_label
        else:
            assigned = np.where(fg_share > config.fg_threshold, fg_label, bg_label)

        subcrop_counts += np.bincount(assigned, minlength=config.num_classes)

    return pixel_counts, subcrop_counts


def class_shift_analysis(
    dataset: LabeledDataset, config: EmpiricalConfig, n_jobs: int = 1
) -> list[ClassShiftRecord]:
    """
    Label every sampled subcrop with one class: the majority foreground class
    when foreground covers more than `fg_threshold` of it, the majority
    background class otherwise. Compare the resulting class frequencies with
    the pixel frequencies inside the global crops.
    """

    if len(dataset) == 0:
        raise ParameterError("The class shift analysis needs a non-empty dataset.")

    st = time.perf_counter()
    per_image = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_image_class_counts)(dataset.labels(index), config, index) for index in range(len(dataset))
    )

    pixel_counts = np.zeros(config.num_classes, dtype=np.int64)
    subcrop_counts = np.zeros(config.num_classes, dtype=np.int64)
    for pixels, subcrops in per_image:
        pixel_counts += pixels
        subcrop_counts += subcrops

    pixel_freq = pixel_counts / max(pixel_counts.sum(), 1)
    subcrop_freq = subcrop_counts / max(subcrop_counts.sum(), 1)

    tt = round(time.perf_counter() - st, 2)
    utils.log_time_metric("analysis", tt, title="class-shift")
    logger.info(f"Class shift analysis over {len(dataset)} image(s) finished in {tt} seconds.")

    return [
        ClassShiftRecord(class_id, float(pixel_freq[class_id]), float(subcrop_freq[class_id]))
        for class_id in range(config.num_classes)
    ]


def _metadata_path(path: str) -> str:
    return f"{path.rsplit('.', 1)[0]}.json"


def write_subcrop_csv(result: SubcropAnalysisResult, path: str) -> str:
    """
    Columns `radius_or_bin, subcrop_area, hit_prob, pixel_prob, ratio`. The
    metadata and notes go to a JSON file next to the CSV.
    """

    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(["radius_or_bin", "subcrop_area", "hit_prob", "pixel_prob", "ratio"])
        for record in result.records:
            writer.writerow(
                [
                    repr(record.descriptor),
                    repr(record.subcrop_area),
                    repr(record.hit_prob),
                    repr(record.pixel_prob),
                    repr(record.ratio),
                ]
            )

    with open(_metadata_path(path), "w", encoding="utf-8") as file:
        json.dump({"metadata": result.metadata, "notes": result.notes}, file, indent=2, sort_keys=True)

    return path


def write_class_shift_csv(records: Sequence[ClassShiftRecord], path: str) -> str:
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(["class", "pixel_freq", "subcrop_freq", "relative_change"])
        for record in records:
            change = record.relative_change
            writer.writerow(
                [record.class_id, repr(record.pixel_freq), repr(record.subcrop_freq), "NA" if change is None else repr(change)]
            )

    return path
