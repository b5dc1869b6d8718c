import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from library.exceptions import DimensionError, InversionError, ParameterError
from library.tensor import Tensor, grid_sample

SINGULAR_TOLERANCE = 1e-6


@dataclass(frozen=True)
class AffineConfig:
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_range: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self) -> None:
        for name in ("scale_range", "rotation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ParameterError(f"'{name}' must be ordered low to high, got {lo} > {hi}.")

        if self.scale_range[0] <= 0:
            raise ParameterError("Scale must be positive.")


@dataclass(frozen=True)
class PhotometricConfig:
    brightness_range: tuple[float, float] = (-0.2, 0.2)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    blur_sigma_range: tuple[float, float] = (0.1, 1.0)
    blur_probability: float = 0.5


@dataclass(frozen=True, eq=False)
class AffineAugment:

    """
    A reversible spatial augmentation. `matrix` maps output pixel coordinates
    `(x, y, 1)` to source pixel coordinates and equals
    `(1 / scale) * R(-rotation_deg)` about the center of an `height x width` frame.
    """

    matrix: np.ndarray
    scale: float
    rotation_deg: float
    height: int
    width: int

    def __post_init__(self) -> None:
        if self.matrix.shape != (2, 3):
            raise DimensionError("matrix", (2, 3), self.matrix.shape)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AffineAugment):
            return NotImplemented

        return (
            np.array_equal(self.matrix, other.matrix)
            and self.scale == other.scale
            and self.rotation_deg == other.rotation_deg
            and (self.height, self.width) == (other.height, other.width)
        )

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.matrix[:, :2]))

    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PhotometricParams:
    brightness: float = 0.0
    contrast: float = 1.0
    blur_sigma: float = 0.0


def affine_matrix(scale: float, rotation_deg: float, height: int, width: int) -> np.ndarray:
    """
    Build the output-to-source matrix of a zoom by `scale` and a rotation by
    `rotation_deg` about the frame center `((w - 1) / 2, (h - 1) / 2)`.
    """

    theta = math.radians(rotation_deg)
    cos, sin = math.cos(theta), math.sin(theta)

    # Inverse of the forward transform: rotate by -theta then shrink by 1/scale
    linear = np.array([[cos, sin], [-sin, cos]], dtype=np.float64) / scale
    center = np.array([(width - 1) / 2, (height - 1) / 2], dtype=np.float64)
    translation = center - linear @ center

    return np.hstack([linear, translation[:, None]])


def identity_affine(height: int, width: int) -> AffineAugment:
    return AffineAugment(affine_matrix(1.0, 0.0, height, width), 1.0, 0.0, height, width)


def sample_affine(
    rng: np.random.Generator, config: AffineConfig, height: int, width: int
) -> AffineAugment:
    scale = float(rng.uniform(*config.scale_range))
    rotation = float(rng.uniform(*config.rotation_range))

    return AffineAugment(affine_matrix(scale, rotation, height, width), scale, rotation, height, width)


def _check_invertible(aug: AffineAugment) -> None:
    if abs(aug.determinant) <= SINGULAR_TOLERANCE:
        raise InversionError(
            f"Affine matrix is singular (|det| = {abs(aug.determinant):.3g})."
        )


def invert_affine(aug: AffineAugment) -> AffineAugment:
    """
    Parameters
    ----------
    - `aug` : AffineAugment
        An invertible augmentation.

    Returns
    -------
    `AffineAugment` :
        The augmentation undoing `aug`, with scale `1 / aug.scale` and rotation
        `-aug.rotation_deg`.
    """

    _check_invertible(aug)

    inverse = np.linalg.inv(aug.homogeneous())[:2]
    return AffineAugment(inverse, 1.0 / aug.scale, -aug.rotation_deg, aug.height, aug.width)


def compose_affine(first: AffineAugment, second: AffineAugment) -> AffineAugment:
    """
    The augmentation equal to applying `first` and then `second`.
    """

    if (first.height, first.width) != (second.height, second.width):
        raise DimensionError("frame", (first.height, first.width), (second.height, second.width))

    matrix = (first.homogeneous() @ second.homogeneous())[:2]
    return AffineAugment(
        matrix,
        first.scale * second.scale,
        first.rotation_deg + second.rotation_deg,
        first.height,
        first.width,
    )


def affine_to_grid(aug: AffineAugment, height: int, width: int) -> np.ndarray:
    """
    Source coordinates of every output pixel as a `(height, width, 2)` float32
    grid of `(x, y)` pairs, ready for `grid_sample`.
    """

    if height < 1 or width < 1:
        raise ParameterError(f"Grid dims must be positive, got {height}x{width}.")

    _check_invertible(aug)

    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    linear, translation = aug.matrix[:, :2], aug.matrix[:, 2]
    gx = linear[0, 0] * xs + linear[0, 1] * ys + translation[0]
    gy = linear[1, 0] * xs + linear[1, 1] * ys + translation[1]

    return np.stack([gx, gy], axis=-1).astype(np.float32)


def apply_affine(images: Tensor, augs: Sequence[AffineAugment]) -> tuple[Tensor, np.ndarray]:
    """
    Resample every image of the batch through its own augmentation.

    Returns
    -------
    `tuple[Tensor, np.ndarray]` :
        The warped batch and its `(n, 1, h, w)` validity mask.
    """

    n, _, height, width = images.shape
    if len(augs) != n:
        raise DimensionError("batch", n, len(augs))

    grid = np.stack([affine_to_grid(aug, height, width) for aug in augs])
    return grid_sample(images, grid.astype(images.data.dtype))


def sample_photometric(rng: np.random.Generator, config: PhotometricConfig) -> PhotometricParams:
    brightness = float(rng.uniform(*config.brightness_range))
    contrast = float(rng.uniform(*config.contrast_range))
    sigma = float(rng.uniform(*config.blur_sigma_range))
    blur = rng.random() < config.blur_probability

    return PhotometricParams(brightness, contrast, sigma if blur else 0.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2 * sigma**2))

    return kernel / kernel.sum()


def apply_photometric(image: np.ndarray, params: PhotometricParams) -> np.ndarray:
    """
    Contrast about the per-image mean, brightness shift, then a separable
    Gaussian blur with radius `ceil(3 * sigma)`. Output is clipped to `[0, 1]`.

    Parameters
    ----------
    - `image` : np.ndarray
        A `(n, c, h, w)` batch with values in `[0, 1]`.
    - `params` : PhotometricParams
    """

    if params.blur_sigma < 0:
        raise ParameterError(f"Blur sigma must be non-negative, got {params.blur_sigma}.")
    if image.ndim != 4:
        raise DimensionError("image.ndim", 4, image.ndim)

    out = image
    if params.contrast != 1.0:
        mean = out.mean(axis=(1, 2, 3), keepdims=True)
        out = (out - mean) * out.dtype.type(params.contrast) + mean
    if params.brightness != 0.0:
        out = out + out.dtype.type(params.brightness)
    if params.blur_sigma > 0:
        kernel = gaussian_kernel(params.blur_sigma)
        out = ndimage.correlate1d(out, kernel, axis=2, mode="nearest")
        out = ndimage.correlate1d(out, kernel, axis=3, mode="nearest")

    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)
