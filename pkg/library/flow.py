from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from library.cropping import CropSpec, crop_grid
from library.exceptions import CropError, DimensionError, ParameterError
from library.tensor import Tensor, bilinear_resize, grid_sample


@dataclass(frozen=True, eq=False)
class FlowField:

    """
    Per-pixel displacement from frame t to frame t+dt, shape `(h, w, 2)`.
    Channel 0 is dx and channel 1 is dy, both in pixels.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise DimensionError("flow", "(h, w, 2)", self.data.shape)
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("Flow contains non-finite values.")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2), dtype=np.float32))

    @classmethod
    def constant(cls, height: int, width: int, dx: float, dy: float) -> "FlowField":
        data = np.empty((height, width, 2), dtype=np.float32)
        data[..., 0] = dx
        data[..., 1] = dy
        return cls(data)

    def as_tensor(self) -> Tensor:
        return Tensor(np.ascontiguousarray(self.data.transpose(2, 0, 1))[None])


def pixel_grid(height: int, width: int) -> np.ndarray:
    ys, xs = np.meshgrid(
        np.arange(height, dtype=np.float32), np.arange(width, dtype=np.float32), indexing="ij"
    )
    return np.stack([xs, ys], axis=-1)


def warp_by_flow(
    features: Tensor, flows: Union[FlowField, Sequence[FlowField]]
) -> tuple[Tensor, np.ndarray]:
    """
    Read `features` at `p + flow(p)` for every pixel `p`.

    Parameters
    ----------
    - `features` : Tensor
        A `(n, c, h, w)` map, usually of frame t+dt.
    - `flows` : FlowField | Sequence[FlowField]
        One flow per sample, or a single flow shared by the batch. Spatial dims
        must match the features.

    Returns
    -------
    `tuple[Tensor, np.ndarray]` :
        Features aligned to frame t and the `(n, 1, h, w)` validity mask.
    """

    n, _, height, width = features.shape
    if isinstance(flows, FlowField):
        flows = [flows] * n
    if len(flows) != n:
        raise DimensionError("batch", n, len(flows))

    for flow in flows:
        if (flow.height, flow.width) != (height, width):
            raise DimensionError(
                "flow.spatial",
                (height, width),
                (flow.height, flow.width),
                hint="Resize the flow with scale_flow first.",
            )

    base = pixel_grid(height, width)
    grid = np.stack([base + flow.data for flow in flows]).astype(features.data.dtype)

    return grid_sample(features, grid)


def occlusion_mask(
    forward: FlowField, backward: FlowField, alpha1: float = 0.1, alpha2: float = 0.5
) -> np.ndarray:
    """
    Forward-backward consistency check. Pixel `p` is occluded when
    `|f(p) + b(p + f(p))|^2 > alpha1 * (|f(p)|^2 + |b(p + f(p))|^2) + alpha2`, with
    `b` read bilinearly. Lookups landing outside the frame are occluded too.

    Returns
    -------
    `np.ndarray` :
        A boolean `(h, w)` mask, True where occluded.
    """

    if forward.data.shape != backward.data.shape:
        raise DimensionError("flow", forward.data.shape, backward.data.shape)
    if alpha1 < 0 or alpha2 < 0:
        raise ParameterError(f"Occlusion thresholds must be non-negative, got {alpha1}, {alpha2}.")

    grid = (pixel_grid(forward.height, forward.width) + forward.data)[None]
    sampled, valid = grid_sample(backward.as_tensor(), grid.astype(np.float32))
    b = sampled.data[0].transpose(1, 2, 0)
    f = forward.data

    mismatch = ((f + b) ** 2).sum(axis=-1)
    magnitude = (f**2).sum(axis=-1) + (b**2).sum(axis=-1)

    return (mismatch > alpha1 * magnitude + alpha2) | (valid[0, 0] == 0)


def scale_flow(flow: FlowField, out_h: int, out_w: int) -> FlowField:
    """
    Bilinearly resize both channels, then rescale dx by `out_w / w` and dy by
    `out_h / h`.
    """

    if out_h < 1 or out_w < 1:
        raise ParameterError(f"Flow target dims must be positive, got {out_h}x{out_w}.")
    if (out_h, out_w) == (flow.height, flow.width):
        return FlowField(flow.data.copy())

    resized = bilinear_resize(flow.as_tensor(), out_h, out_w).data[0].transpose(1, 2, 0)
    factors = np.array([out_w / flow.width, out_h / flow.height], dtype=np.float32)

    return FlowField(np.ascontiguousarray(resized * factors, dtype=np.float32))


def crop_flow(
    flow: FlowField,
    crop: CropSpec,
    out_h: int,
    out_w: int,
    target: Optional[CropSpec] = None,
) -> FlowField:
    """
    Restrict `flow` to `crop` and express it in the coordinates of an
    `out_h x out_w` resample of that crop.

    Parameters
    ----------
    - `flow` : FlowField
    - `crop` : CropSpec
        The region of frame t. Must lie inside the flow.
    - `out_h`, `out_w` : int
    - `target` : Optional[CropSpec]
        The region of frame t+dt when it differs from `crop` by a shift. Its
        size must equal the size of `crop`. The offset between the two crops
        is folded into the displacements.
    """

    if (crop.source_h, crop.source_w) != (flow.height, flow.width):
        raise CropError(
            f"Crop source {crop.source_h}x{crop.source_w} does not match flow {flow.height}x{flow.width}."
        )

    grid = crop_grid(crop, out_h, out_w)[None]
    sampled, _ = grid_sample(flow.as_tensor(), grid)
    data = sampled.data[0].transpose(1, 2, 0)

    if target is not None:
        if (target.w, target.h) != (crop.w, crop.h):
            raise CropError("Paired crops must have equal size to share a flow.")

        offset = np.array([crop.x - target.x, crop.y - target.y], dtype=np.float32)
        data = data + offset

    factors = np.array([out_w / crop.w, out_h / crop.h], dtype=np.float32)
    return FlowField(np.ascontiguousarray(data * factors, dtype=np.float32))


def compose_flow(first: FlowField, second: FlowField) -> FlowField:
    """
    The single flow equivalent to warping by `first` and then by `second`:
    `second(p) + first(p + second(p))`.
    """

    if first.data.shape != second.data.shape:
        raise DimensionError("flow", first.data.shape, second.data.shape)

    grid = (pixel_grid(second.height, second.width) + second.data)[None]
    sampled, _ = grid_sample(first.as_tensor(), grid.astype(np.float32))

    return FlowField(second.data + sampled.data[0].transpose(1, 2, 0))
