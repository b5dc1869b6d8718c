"""
On-disk formats of the synthetic datasets: Middlebury `.flo` flow files, binary
PPM frames, binary PGM label maps, and the tab-separated sample manifest.
"""

import os
from dataclasses import astuple, dataclass, fields

import numpy as np
from PIL import Image, UnidentifiedImageError

from library.exceptions import FormatError
from library.flow import FlowField

FLO_MAGIC = b"PIEH"
FLO_HEADER_BYTES = 12
MANIFEST_NAME = "manifest.tsv"


def save_flo(flow: FlowField, path: str) -> None:
    """
    Write `flow` as magic `PIEH`, little-endian int32 width and height, then
    `h * w` interleaved `(dx, dy)` float32 pairs.
    """

    header = np.array([flow.width, flow.height], dtype="<i4").tobytes()
    payload = np.ascontiguousarray(flow.data, dtype="<f4").tobytes()

    with open(path, "wb") as file:
        file.write(FLO_MAGIC + header + payload)


def load_flo(path: str) -> FlowField:
    with open(path, "rb") as file:
        raw = file.read()

    if len(raw) < 4 or raw[:4] != FLO_MAGIC:
        raise FormatError(f"'{path}' has magic {raw[:4]!r}, expected {FLO_MAGIC!r}", offset=0)
    if len(raw) < FLO_HEADER_BYTES:
        raise FormatError(f"'{path}' ends inside the header", offset=len(raw))

    width, height = (int(value) for value in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if width <= 0:
        raise FormatError(f"'{path}' declares width {width}", offset=4)
    if height <= 0:
        raise FormatError(f"'{path}' declares height {height}", offset=8)

    expected = FLO_HEADER_BYTES + width * height * 2 * 4
    if len(raw) < expected:
        raise FormatError(
            f"'{path}' is truncated: {width}x{height} flow needs {expected} bytes", offset=len(raw)
        )

    data = np.frombuffer(raw, dtype="<f4", count=width * height * 2, offset=FLO_HEADER_BYTES)
    return FlowField(data.reshape(height, width, 2).astype(np.float32))


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def save_ppm(image: np.ndarray, path: str) -> None:
    """
    Parameters
    ----------
    - `image` : np.ndarray
        A `(3, h, w)` or `(1, 3, h, w)` RGB array with values in `[0, 1]`.
    - `path` : str
    """

    if image.ndim == 4:
        image = image[0]
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"PPM frames are (3, h, w), got {image.shape}")

    Image.fromarray(quantize(image.transpose(1, 2, 0))).save(path, format="PPM")


def _open_netpbm(path: str, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as image:
            image: Image.Image

            if image.format != "PPM" or image.mode != mode:
                raise FormatError(
                    f"'{path}' is {image.format}/{image.mode}, expected binary PPM/{mode}", offset=0
                )

            return np.asarray(image)
    except (UnidentifiedImageError, SyntaxError, ValueError) as error:
        raise FormatError(f"'{path}' has a malformed header: {error}", offset=0) from error


def load_ppm(path: str) -> np.ndarray:
    """
    Returns
    -------
    `np.ndarray` :
        A `(3, h, w)` float32 array with values `byte / 255`.
    """

    pixels = _open_netpbm(path, "RGB")
    return np.ascontiguousarray(pixels.transpose(2, 0, 1), dtype=np.float32) / np.float32(255)


def save_pgm(labels: np.ndarray, path: str) -> None:
    if labels.ndim != 2:
        raise FormatError(f"PGM label maps are (h, w), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise FormatError("PGM label maps hold class ids in [0, 255]")

    Image.fromarray(labels.astype(np.uint8)).save(path, format="PPM")


def load_pgm(path: str) -> np.ndarray:
    return _open_netpbm(path, "L").astype(np.int64)


@dataclass(frozen=True)
class ManifestEntry:

    """
    One manifest line. File paths are relative to the manifest directory.
    """

    sample_id: str
    dt: int
    frame_t: str
    frame_t_plus: str
    flow_fwd: str
    flow_bwd: str
    labels_t: str

    def to_line(self) -> str:
        return "\t".join(str(value) for value in astuple(self))


def write_manifest(entries: list[ManifestEntry], directory: str) -> str:
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8", newline="\n") as file:
        for entry in entries:
            file.write(entry.to_line() + "\n")

    return path


def read_manifest(path: str) -> list[ManifestEntry]:
    """
    Parse a manifest file. Blank lines are skipped.

    Raises
    ------
    `FormatError` :
        A line with the wrong column count or a non-integer `dt`. The offset
        points at the start of the line.
    """

    columns = len(fields(ManifestEntry))
    entries = []
    offset = 0

    with open(path, "rb") as file:
        for raw in file:
            line = raw.decode("utf-8").rstrip("\r\n")
            if line.strip():
                parts = line.split("\t")
                if len(parts) != columns:
                    raise FormatError(
                        f"Manifest line has {len(parts)} columns, expected {columns}", offset=offset
                    )

                try:
                    dt = int(parts[1])
                except ValueError as error:
                    raise FormatError(f"Manifest dt '{parts[1]}' is not an integer", offset=offset) from error

                entries.append(ManifestEntry(parts[0], dt, *parts[2:]))

            offset += len(raw)

    return entries
