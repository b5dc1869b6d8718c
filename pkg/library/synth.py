"""
Deterministic synthetic videos: textured shapes translating over a static
value-noise background. Every rendered pair carries exact flow in both
directions, the analytic occlusion of both frames and per-pixel class labels.
"""

import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from scipy import ndimage

from library import formats, utils
from library.exceptions import ParameterError
from library.flow import FlowField, occlusion_mask
from library.types import ShapeKind

BACKGROUND_CLASS = 0
TEXTURE_AMPLITUDE = 0.12


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    kind: ShapeKind
    color: tuple[float, float, float]
    area_range: tuple[float, float]


# Size bands overlap and together span two orders of magnitude of canvas area.
DEFAULT_CLASSES: tuple[ClassSpec, ...] = (
    ClassSpec(1, "disc", "circle", (0.85, 0.25, 0.20), (0.002, 0.008)),
    ClassSpec(2, "tile", "rectangle", (0.20, 0.45, 0.85), (0.004, 0.02)),
    ClassSpec(3, "ball", "circle", (0.95, 0.80, 0.20), (0.01, 0.05)),
    ClassSpec(4, "slab", "rectangle", (0.25, 0.70, 0.30), (0.03, 0.12)),
    ClassSpec(5, "dome", "circle", (0.60, 0.30, 0.75), (0.06, 0.20)),
)


@dataclass(frozen=True)
class ShapeSpec:

    """
    A single moving object. `center` is in pixel-index coordinates, `size` is the
    full `(w, h)` extent (a circle uses `w` as its diameter) and `velocity` is in
    pixels per frame.
    """

    kind: ShapeKind
    class_id: int
    center: tuple[float, float]
    size: tuple[float, float]
    velocity: tuple[float, float]
    color: tuple[float, float, float]
    texture_seed: int

    def __post_init__(self) -> None:
        if self.class_id < 1:
            raise ParameterError(f"Shape class ids start at 1, got {self.class_id}.")


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    background_seed: int
    shapes: tuple[ShapeSpec, ...] = ()


@dataclass
class FramePairSample:
    frame_t: np.ndarray
    frame_t_plus: np.ndarray
    flow_fwd: FlowField
    flow_bwd: Optional[FlowField]
    labels_t: np.ndarray
    dt: int
    occlusion_fwd: Optional[np.ndarray] = None
    occlusion_bwd: Optional[np.ndarray] = None
    sample_id: str = ""


@dataclass(frozen=True)
class SynthConfig:
    scenes: int = 512
    height: int = 128
    width: int = 256
    shapes_range: tuple[int, int] = (2, 6)
    speed_max: int = 4
    dt_range: tuple[int, int] = (1, 3)
    seed: int = 0
    classes: tuple[ClassSpec, ...] = field(default=DEFAULT_CLASSES)

    @property
    def num_classes(self) -> int:
        return len(self.classes) + 1


def _background(scene: SceneSpec) -> np.ndarray:
    rng = np.random.default_rng(scene.background_seed)
    coarse_h = max(2, math.ceil(scene.height / 16) + 1)
    coarse_w = max(2, math.ceil(scene.width / 16) + 1)

    base = rng.uniform(0.35, 0.55, size=(coarse_h, coarse_w))
    tint = rng.uniform(-0.04, 0.04, size=3)
    noise = ndimage.zoom(base, (scene.height / coarse_h, scene.width / coarse_w), order=1)
    noise = noise[: scene.height, : scene.width]

    return np.stack([noise + tint[c] for c in range(3)]).astype(np.float32)


def _shape_mask(shape: ShapeSpec, cx: float, cy: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    if shape.kind == "circle":
        radius = shape.size[0] / 2
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2

    half_w, half_h = shape.size[0] / 2, shape.size[1] / 2
    return (np.abs(xs - cx) <= half_w) & (np.abs(ys - cy) <= half_h)


def _shape_texture(shape: ShapeSpec, rx: np.ndarray, ry: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(shape.texture_seed)
    period = rng.uniform(6.0, 14.0)
    angle = rng.uniform(0, math.pi)
    phase = rng.uniform(0, 2 * math.pi)

    wave = np.sin(2 * math.pi * (rx * math.cos(angle) + ry * math.sin(angle)) / period + phase)
    color = np.asarray(shape.color, dtype=np.float64)[:, None]

    return np.clip(color + TEXTURE_AMPLITUDE * wave[None], 0.0, 1.0)


def render_frame(scene: SceneSpec, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Render frame `t` of `scene`.

    Returns
    -------
    `tuple[np.ndarray, np.ndarray, np.ndarray]` :
        The `(3, h, w)` image, the `(h, w)` class labels and the `(h, w)` index of
        the front-most shape at every pixel (-1 for background).
    """

    if scene.height < 1 or scene.width < 1:
        raise ParameterError(f"Canvas must be non-empty, got {scene.height}x{scene.width}.")

    ys, xs = np.mgrid[0 : scene.height, 0 : scene.width].astype(np.float64)
    image = _background(scene)
    labels = np.full((scene.height, scene.width), BACKGROUND_CLASS, dtype=np.int64)
    owner = np.full((scene.height, scene.width), -1, dtype=np.int64)

    for index, shape in enumerate(scene.shapes):
        cx = shape.center[0] + shape.velocity[0] * t
        cy = shape.center[1] + shape.velocity[1] * t
        mask = _shape_mask(shape, cx, cy, xs, ys)
        if not mask.any():
            continue

        texture = _shape_texture(shape, xs[mask] - cx, ys[mask] - cy)
        image[:, mask] = texture
        labels[mask] = shape.class_id
        owner[mask] = index

    return image, labels, owner


def _flow_from_owner(scene: SceneSpec, owner: np.ndarray, dt: int, sign: int) -> np.ndarray:
    velocities = np.zeros((len(scene.shapes) + 1, 2), dtype=np.float32)
    for index, shape in enumerate(scene.shapes):
        velocities[index] = (sign * shape.velocity[0] * dt, sign * shape.velocity[1] * dt)

    # Background owner -1 picks the trailing zero row
    return velocities[owner]


def _analytic_occlusion(flow: np.ndarray, owner_src: np.ndarray, owner_dst: np.ndarray) -> np.ndarray:
    height, width = owner_src.shape
    ys, xs = np.mgrid[0:height, 0:width]
    tx = np.rint(xs + flow[..., 0]).astype(np.int64)
    ty = np.rint(ys + flow[..., 1]).astype(np.int64)

    outside = (tx < 0) | (tx >= width) | (ty < 0) | (ty >= height)
    landed = owner_dst[np.clip(ty, 0, height - 1), np.clip(tx, 0, width - 1)]

    return outside | (landed != owner_src)


def render_pair(scene: SceneSpec, dt: int, sample_id: str = "") -> FramePairSample:
    """
    Render frames 0 and `dt` of `scene` with exact flow and occlusion.

    The forward occlusion marks frame t pixels whose correspondent in frame t+dt
    is covered by a different front-most object or leaves the frame. The
    backward occlusion is the same test from frame t+dt, which marks the
    dis-occluded band behind every moving object.
    """

    if dt < 0:
        raise ParameterError(f"Temporal stride must be non-negative, got {dt}.")

    frame_t, labels_t, owner_t = render_frame(scene, 0)
    frame_t_plus, _, owner_t_plus = render_frame(scene, dt)

    flow_fwd = _flow_from_owner(scene, owner_t, dt, sign=1)
    flow_bwd = _flow_from_owner(scene, owner_t_plus, dt, sign=-1)

    return FramePairSample(
        frame_t=frame_t,
        frame_t_plus=frame_t_plus,
        flow_fwd=FlowField(flow_fwd),
        flow_bwd=FlowField(flow_bwd),
        labels_t=labels_t,
        dt=dt,
        occlusion_fwd=_analytic_occlusion(flow_fwd, owner_t, owner_t_plus),
        occlusion_bwd=_analytic_occlusion(flow_bwd, owner_t_plus, owner_t),
        sample_id=sample_id,
    )


def generate_scene(rng: np.random.Generator, config: SynthConfig) -> SceneSpec:
    """
    Draw a random scene. Shapes pick a class uniformly and take that class's kind,
    color and size band. Larger shapes are drawn first so small ones stay visible.
    """

    canvas = config.height * config.width
    count = int(rng.integers(config.shapes_range[0], config.shapes_range[1] + 1))

    shapes = []
    for _ in range(count):
        spec = config.classes[int(rng.integers(len(config.classes)))]
        lo, hi = spec.area_range
        area = math.exp(rng.uniform(math.log(lo), math.log(hi))) * canvas

        if spec.kind == "circle":
            diameter = 2 * math.sqrt(area / math.pi)
            size = (diameter, diameter)
        else:
            aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
            size = (math.sqrt(area * aspect), math.sqrt(area / aspect))

        center = (
            float(rng.integers(0, config.width)),
            float(rng.integers(0, config.height)),
        )
        velocity = tuple(
            float(value) for value in rng.integers(-config.speed_max, config.speed_max + 1, size=2)
        )

        shapes.append(
            ShapeSpec(
                kind=spec.kind,
                class_id=spec.class_id,
                center=center,
                size=size,
                velocity=velocity,
                color=spec.color,
                texture_seed=int(rng.integers(2**31)),
            )
        )

    shapes.sort(key=lambda shape: shape.size[0] * shape.size[1], reverse=True)
    return SceneSpec(config.height, config.width, int(rng.integers(2**31)), tuple(shapes))


def generate_scenes(config: SynthConfig) -> tuple[list[SceneSpec], list[int]]:
    """
    Draw `config.scenes` scenes and their temporal strides from `config.seed`.
    """

    rng = np.random.default_rng(config.seed)
    scenes, dts = [], []
    for _ in range(config.scenes):
        scenes.append(generate_scene(rng, config))
        dts.append(int(rng.integers(config.dt_range[0], config.dt_range[1] + 1)))

    return scenes, dts


class SyntheticDataset:

    """
    In-memory dataset rendering pairs lazily from scene specs.
    """

    def __init__(self, scenes: Sequence[SceneSpec], dts: Sequence[int]) -> None:
        if len(scenes) != len(dts):
            raise ParameterError("Every scene needs a temporal stride.")

        self.scenes = list(scenes)
        self.dts = list(dts)
        self._cache: dict[int, FramePairSample] = {}

    @classmethod
    def from_config(cls, config: SynthConfig) -> "SyntheticDataset":
        return cls(*generate_scenes(config))

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, index: int) -> FramePairSample:
        if index not in self._cache:
            self._cache[index] = render_pair(self.scenes[index], self.dts[index], sample_id=f"{index:05d}")

        return self._cache[index]

    def labels(self, index: int) -> np.ndarray:
        return self[index].labels_t


class ManifestDataset:

    """
    Dataset read from a `manifest.tsv` and its PPM/PGM/.flo files. A backward flow
    column of `-` means the pair has no backward flow. Occlusion is computed
    with the forward-backward check when both flows exist.
    """

    def __init__(self, path: str, alpha1: float = 0.1, alpha2: float = 0.5) -> None:
        if os.path.isdir(path):
            path = os.path.join(path, formats.MANIFEST_NAME)

        self.path = path
        self.root = os.path.dirname(os.path.abspath(path))
        self.entries = formats.read_manifest(path)
        self.alpha1 = alpha1
        self.alpha2 = alpha2

    def __len__(self) -> int:
        return len(self.entries)

    def _resolve(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    def labels(self, index: int) -> np.ndarray:
        return formats.load_pgm(self._resolve(self.entries[index].labels_t))

    def __getitem__(self, index: int) -> FramePairSample:
        entry = self.entries[index]

        flow_fwd = formats.load_flo(self._resolve(entry.flow_fwd))
        flow_bwd = None if entry.flow_bwd == "-" else formats.load_flo(self._resolve(entry.flow_bwd))

        occlusion_fwd = occlusion_bwd = None
        if flow_bwd is not None:
            occlusion_fwd = occlusion_mask(flow_fwd, flow_bwd, self.alpha1, self.alpha2)
            occlusion_bwd = occlusion_mask(flow_bwd, flow_fwd, self.alpha1, self.alpha2)

        return FramePairSample(
            frame_t=formats.load_ppm(self._resolve(entry.frame_t)),
            frame_t_plus=formats.load_ppm(self._resolve(entry.frame_t_plus)),
            flow_fwd=flow_fwd,
            flow_bwd=flow_bwd,
            labels_t=self.labels(index),
            dt=entry.dt,
            occlusion_fwd=occlusion_fwd,
            occlusion_bwd=occlusion_bwd,
            sample_id=entry.sample_id,
        )


def _write_sample(scene: SceneSpec, dt: int, sample_id: str, out_dir: str) -> formats.ManifestEntry:
    sample = render_pair(scene, dt, sample_id=sample_id)
    directory = os.path.join(out_dir, sample_id)
    os.makedirs(directory, exist_ok=True)

    names = {
        "frame_t": "frame_t.ppm",
        "frame_t_plus": "frame_t_plus.ppm",
        "flow_fwd": "flow_fwd.flo",
        "flow_bwd": "flow_bwd.flo",
        "labels_t": "labels_t.pgm",
    }

    formats.save_ppm(sample.frame_t, os.path.join(directory, names["frame_t"]))
    formats.save_ppm(sample.frame_t_plus, os.path.join(directory, names["frame_t_plus"]))
    formats.save_flo(sample.flow_fwd, os.path.join(directory, names["flow_fwd"]))
    formats.save_flo(sample.flow_bwd, os.path.join(directory, names["flow_bwd"]))
    formats.save_pgm(sample.labels_t, os.path.join(directory, names["labels_t"]))

    return formats.ManifestEntry(
        sample_id, dt, *(f"{sample_id}/{names[key]}" for key in names)
    )


def write_dataset(config: SynthConfig, out_dir: str, n_jobs: int = 1) -> str:
    """
    Render the dataset described by `config` into `out_dir`.

    Parameters
    ----------
    - `config` : SynthConfig
    - `out_dir` : str
        Created if missing. Each sample gets its own directory.
    - `n_jobs` : int
        joblib worker count. Output is identical for any worker count.

    Returns
    -------
    `str` :
        Path to the written manifest.
    """

    st = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)

    scenes, dts = generate_scenes(config)
    entries = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_write_sample)(scene, dt, f"{index:05d}", out_dir)
        for index, (scene, dt) in enumerate(zip(scenes, dts))
    )

    path = formats.write_manifest(list(entries), out_dir)
    tt = round(time.perf_counter() - st, 2)
    utils.log_time_metric("gen-data", tt, title=f"scenes {len(entries)}", message=out_dir)
    logger.info(f"Rendered {len(entries)} samples into '{out_dir}' in {tt} seconds.")

    return path
