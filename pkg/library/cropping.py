import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal, Optional

import numpy as np
from loguru import logger
from scipy import stats

from library.exceptions import CropError, ParameterError
from library.tensor import Tensor, grid_sample
from library.types import AreaMode

if TYPE_CHECKING:
    from library.flow import FlowField

# Crop rectangles use continuous edge coordinates: pixel i covers [i, i + 1).
BOUNDS_TOLERANCE = 1e-6


@dataclass(frozen=True)
class CropSpec:
    x: float
    y: float
    w: float
    h: float
    source_h: int
    source_w: int

    def __post_init__(self) -> None:
        if self.w < 1 or self.h < 1:
            raise CropError(f"Crop must be at least 1x1 pixel, got {self.w:.3f}x{self.h:.3f}.")
        if (
            self.x < -BOUNDS_TOLERANCE
            or self.y < -BOUNDS_TOLERANCE
            or self.x + self.w > self.source_w + BOUNDS_TOLERANCE
            or self.y + self.h > self.source_h + BOUNDS_TOLERANCE
        ):
            raise CropError(
                f"Crop ({self.x:.2f}, {self.y:.2f}, {self.w:.2f}, {self.h:.2f}) leaves the "
                f"{self.source_h}x{self.source_w} frame."
            )

    @classmethod
    def full(cls, height: int, width: int) -> "CropSpec":
        return cls(0.0, 0.0, float(width), float(height), height, width)

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    @property
    def area_fraction(self) -> float:
        return self.w * self.h / (self.source_w * self.source_h)

    def shifted_to(self, cx: float, cy: float) -> "CropSpec":
        """
        Same-size crop centered as close to `(cx, cy)` as the frame allows.
        """

        x = min(max(cx - self.w / 2, 0.0), self.source_w - self.w)
        y = min(max(cy - self.h / 2, 0.0), self.source_h - self.h)
        return CropSpec(x, y, self.w, self.h, self.source_h, self.source_w)


@dataclass(frozen=True)
class GridCell:
    index: int
    row: int
    col: int
    x: float
    y: float
    w: float
    h: float


@dataclass(frozen=True)
class SubcropPair:
    crop_t: CropSpec
    crop_t_plus: CropSpec
    center_t_plus: tuple[float, float]
    center_t: tuple[float, float]
    area: float
    cell: int


def _fit(w: float, h: float, width: int, height: int, keep: Literal["area", "aspect"]) -> tuple[float, float]:
    if keep == "aspect":
        shrink = min(1.0, width / w, height / h)
        return w * shrink, h * shrink

    area = w * h
    if w > width:
        w, h = float(width), min(float(height), area / width)
    if h > height:
        h, w = float(height), min(float(width), area / height)

    return w, h


def sample_global_crop_pair(
    rng: np.random.Generator,
    height: int,
    width: int,
    area_range: tuple[float, float],
    out_h: int,
    out_w: int,
    area_mode: AreaMode = "uniform",
    area_sigma: float = 0.1,
) -> CropSpec:
    """
    Draw the single rectangle shared by both frames of a pair.

    Parameters
    ----------
    - `rng` : np.random.Generator
    - `height`, `width` : int
        Source frame dims.
    - `area_range` : tuple[float, float]
        Crop area as a fraction of the frame, inside `(0, 1]`.
    - `out_h`, `out_w` : int
        Resample target. The crop takes the aspect ratio of the target.
    - `area_mode` : AreaMode
        `uniform` draws the area from `U[lo, hi]`. `truncnorm` draws from a normal
        centered on the middle of the range with std `area_sigma`, truncated to
        the range.
    """

    lo, hi = area_range
    if not 0 < lo <= hi <= 1:
        raise ParameterError(f"Global crop area range must lie in (0, 1], got {area_range}.")
    if lo * height * width < 1:
        raise CropError(f"Area fraction {lo} of a {height}x{width} frame is below one pixel.")

    if area_mode == "truncnorm" and hi > lo:
        mean = (lo + hi) / 2
        a, b = (lo - mean) / area_sigma, (hi - mean) / area_sigma
        area = float(stats.truncnorm.rvs(a, b, loc=mean, scale=area_sigma, random_state=rng))
    else:
        area = float(rng.uniform(lo, hi))

    aspect = out_w / out_h
    w = math.sqrt(area * height * width * aspect)
    w, h = _fit(w, w / aspect, width, height, keep="aspect")
    w, h = min(w, float(width)), min(h, float(height))

    x = float(rng.uniform(0.0, width - w))
    y = float(rng.uniform(0.0, height - h))

    return CropSpec(x, y, w, h, height, width)


def jitter_crop(rng: np.random.Generator, crop: CropSpec, fraction: float) -> CropSpec:
    """
    Shift `crop` by up to `fraction` of the frame size on each axis, staying in bounds.
    """

    dx = rng.uniform(-fraction, fraction) * crop.source_w
    dy = rng.uniform(-fraction, fraction) * crop.source_h
    cx, cy = crop.center

    return crop.shifted_to(cx + dx, cy + dy)


def grid_side(height: int, width: int, s_min: float, s_max: float) -> float:
    return min(height, width) * math.sqrt((s_min + s_max) / 2)


def grid_cells(height: int, width: int, s_min: float, s_max: float) -> list[GridCell]:
    """
    Tile an `height x width` frame with square cells of side
    `min(height, width) * sqrt((s_min + s_max) / 2)`. Edge cells are clipped.
    Cells are listed in row-major order; callers draw them without replacement.
    """

    if not 0 < s_min <= s_max <= 1:
        raise ParameterError(f"Subcrop area range must satisfy 0 < lo <= hi <= 1, got ({s_min}, {s_max}).")

    side = grid_side(height, width, s_min, s_max)
    rows, cols = math.ceil(height / side), math.ceil(width / side)

    cells = []
    for row in range(rows):
        for col in range(cols):
            x, y = col * side, row * side
            cells.append(
                GridCell(len(cells), row, col, x, y, min(side, width - x), min(side, height - y))
            )

    return cells


def _sample_flow(flow: np.ndarray, x: float, y: float) -> np.ndarray:
    """
    Bilinear flow value at edge coordinate `(x, y)`, clamped to the frame.
    """

    height, width = flow.shape[:2]
    px = min(max(x - 0.5, 0.0), width - 1)
    py = min(max(y - 0.5, 0.0), height - 1)
    x0, y0 = min(int(px), max(width - 2, 0)), min(int(py), max(height - 2, 0))
    x1, y1 = min(x0 + 1, width - 1), min(y0 + 1, height - 1)
    wx, wy = px - x0, py - y0

    return (
        flow[y0, x0] * (1 - wx) * (1 - wy)
        + flow[y0, x1] * wx * (1 - wy)
        + flow[y1, x0] * (1 - wx) * wy
        + flow[y1, x1] * wx * wy
    )


def sample_subcrop_pair(
    rng: np.random.Generator,
    cell: GridCell,
    flow: "FlowField",
    jitter: float = 0.1,
    area_range: tuple[float, float] = (0.05, 0.3),
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3),
    attempts: int = 3,
) -> Optional[SubcropPair]:
    """
    Flow-informed subcrop pair inside one grid cell.

    The frame t+dt center `(u, v)` is uniform in `cell`. The frame t center is
    `(u, v) - flow(u, v) + jitter * (W, H) * U[-1, 1]`. Crops keep their sampled
    size and are shifted into the frame.

    Returns
    -------
    `Optional[SubcropPair]` :
        None when the warped center leaves the frame on every attempt.
    """

    height, width = flow.height, flow.width

    for _ in range(attempts):
        u = float(rng.uniform(cell.x, cell.x + cell.w))
        v = float(rng.uniform(cell.y, cell.y + cell.h))
        area = float(rng.uniform(*area_range))
        aspect = float(rng.uniform(*aspect_range))
        ju, jv = rng.uniform(-jitter, jitter, size=2) if jitter > 0 else (0.0, 0.0)

        du, dv = _sample_flow(flow.data, u, v)
        u_t = u - float(du) + float(ju) * width
        v_t = v - float(dv) + float(jv) * height
        if not (0 <= u_t < width and 0 <= v_t < height):
            continue

        pixels = area * height * width
        w, h = _fit(math.sqrt(pixels * aspect), math.sqrt(pixels / aspect), width, height, keep="area")
        template = CropSpec(0.0, 0.0, w, h, height, width)

        return SubcropPair(
            crop_t=template.shifted_to(u_t, v_t),
            crop_t_plus=template.shifted_to(u, v),
            center_t_plus=(u, v),
            center_t=(u_t, v_t),
            area=w * h / (height * width),
            cell=cell.index,
        )

    return None


class SubcropSampler:

    """
    Draws up to `num_subcrops` pairs from distinct grid cells of a global crop.
    `calls` counts invocations and `rejections` counts cells that yielded no pair.
    """

    def __init__(
        self,
        num_subcrops: int = 6,
        area_range: tuple[float, float] = (0.05, 0.3),
        aspect_range: tuple[float, float] = (3 / 4, 4 / 3),
        jitter: float = 0.1,
        attempts: int = 3,
    ) -> None:
        if num_subcrops < 0:
            raise ParameterError(f"num_subcrops must be non-negative, got {num_subcrops}.")

        self.num_subcrops = num_subcrops
        self.area_range = area_range
        self.aspect_range = aspect_range
        self.jitter = jitter
        self.attempts = attempts

        self.calls = 0
        self.rejections = 0

    def sample(self, rng: np.random.Generator, flow: "FlowField") -> list[SubcropPair]:
        self.calls += 1

        cells = grid_cells(flow.height, flow.width, *self.area_range)
        order = rng.permutation(len(cells))[: self.num_subcrops]

        pairs = []
        for index in order:
            pair = sample_subcrop_pair(
                rng,
                cells[index],
                flow,
                jitter=self.jitter,
                area_range=self.area_range,
                aspect_range=self.aspect_range,
                attempts=self.attempts,
            )
            if pair is None:
                self.rejections += 1
                logger.debug(f"Grid cell {cells[index].index} rejected after {self.attempts} attempts.")
                continue

            pairs.append(pair)

        return pairs


def crop_grid(crop: CropSpec, out_h: int, out_w: int) -> np.ndarray:
    """
    Source pixel coordinates of an `out_h x out_w` resample of `crop`, as an
    `(out_h, out_w, 2)` float32 grid clamped to the frame.
    """

    if out_h < 1 or out_w < 1:
        raise ParameterError(f"Output dims must be positive, got {out_h}x{out_w}.")

    xs = crop.x + (np.arange(out_w, dtype=np.float64) + 0.5) * (crop.w / out_w) - 0.5
    ys = crop.y + (np.arange(out_h, dtype=np.float64) + 0.5) * (crop.h / out_h) - 0.5
    xs = np.clip(xs, 0, crop.source_w - 1)
    ys = np.clip(ys, 0, crop.source_h - 1)

    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx, gy], axis=-1).astype(np.float32)


def extract_resize(frame: np.ndarray, crop: CropSpec, out_h: int, out_w: int) -> np.ndarray:
    """
    Bilinear resample of the `crop` region of `frame` to `out_h x out_w`.

    Parameters
    ----------
    - `frame` : np.ndarray
        A `(c, h, w)` or `(n, c, h, w)` array whose spatial dims match the crop source.
    """

    squeeze = frame.ndim == 3
    batch = frame[None] if squeeze else frame
    if batch.shape[2:] != (crop.source_h, crop.source_w):
        raise CropError(
            f"Crop source {crop.source_h}x{crop.source_w} does not match frame {batch.shape[2:]}."
        )

    grid = np.broadcast_to(crop_grid(crop, out_h, out_w), (batch.shape[0], out_h, out_w, 2))
    out, _ = grid_sample(Tensor(batch), grid.astype(batch.dtype))

    return out.data[0] if squeeze else out.data
