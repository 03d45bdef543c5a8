"""Image, depth and JSON file formats."""

from __future__ import annotations

import json
import struct
from typing import TYPE_CHECKING, Any

import numpy as np
from PIL import Image

from .const import _LOGGER
from .exceptions import InvalidInputError
from .scene import RenderedView

if TYPE_CHECKING:
    from pathlib import Path

    from .data import ByteImage, FloatArray, LabelImage

DEPTH_MAGIC = b"PFDEPTH1"
DEPTH_HEADER = struct.Struct("<8sII")
MAX_PPM_ID = (1 << 24) - 1


def write_ppm(path: Path, rgb: ByteImage) -> None:
    """Write an (H, W, 3) byte image as binary PPM (P6)."""
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path, format="PPM")


def read_ppm(path: Path) -> ByteImage:
    """Read a PPM file into an (H, W, 3) byte image."""
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"), dtype=np.uint8).copy()


def write_pgm(path: Path, gray: ByteImage) -> None:
    """Write an (H, W) byte image as binary PGM (P5)."""
    Image.fromarray(np.ascontiguousarray(gray, dtype=np.uint8)).save(path, format="PPM")


def read_pgm(path: Path) -> ByteImage:
    """Read a PGM file into an (H, W) byte image."""
    with Image.open(path) as image:
        return np.asarray(image.convert("L"), dtype=np.uint8).copy()


def ids_to_rgb(ids: LabelImage) -> ByteImage:
    """Pack non-negative ids below 2^24 into RGB bytes, red most significant."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() > MAX_PPM_ID):
        msg = "Instance ids must lie in [0, 2^24)"
        raise InvalidInputError(msg)
    return np.stack([(ids >> 16) & 0xFF, (ids >> 8) & 0xFF, ids & 0xFF], axis=-1).astype(np.uint8)


def rgb_to_ids(rgb: ByteImage) -> LabelImage:
    """Unpack RGB bytes written by ids_to_rgb."""
    rgb = np.asarray(rgb, dtype=np.int64)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


def write_instance_ppm(path: Path, ids: LabelImage) -> None:
    """Write an instance id map as PPM."""
    write_ppm(path, ids_to_rgb(ids))


def read_instance_ppm(path: Path) -> LabelImage:
    """Read an instance id map from PPM."""
    return rgb_to_ids(read_ppm(path))


def write_depth(path: Path, depth: FloatArray) -> None:
    """Write a depth map as a headed little-endian float32 raster."""
    height, width = depth.shape
    payload = np.ascontiguousarray(depth, dtype="<f4").tobytes()
    path.write_bytes(DEPTH_HEADER.pack(DEPTH_MAGIC, width, height) + payload)


def read_depth(path: Path) -> FloatArray:
    """Read a depth raster written by write_depth."""
    raw = path.read_bytes()
    if len(raw) < DEPTH_HEADER.size:
        msg = f"{path} is too short for a depth raster"
        raise InvalidInputError(msg)
    magic, width, height = DEPTH_HEADER.unpack_from(raw)
    if magic != DEPTH_MAGIC:
        msg = f"{path} has bad depth magic {magic!r}"
        raise InvalidInputError(msg)
    expected = DEPTH_HEADER.size + 4 * width * height
    if len(raw) != expected:
        msg = f"{path} holds {len(raw)} bytes, expected {expected}"
        raise InvalidInputError(msg)
    data = np.frombuffer(raw, dtype="<f4", offset=DEPTH_HEADER.size)
    return data.reshape(height, width).astype(np.float64)


def write_json(path: Path, payload: Any) -> None:
    """Write canonical JSON (sorted keys) followed by a newline."""
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: Path) -> Any:
    """Read a JSON file."""
    return json.loads(path.read_text())


def view_paths(directory: Path, index: int) -> dict[str, Path]:
    """Return the file names of one view's image stack."""
    stem = f"view_{index:03d}"
    return {
        "rgb": directory / f"{stem}_rgb.ppm",
        "semantic": directory / f"{stem}_semantic.pgm",
        "instance": directory / f"{stem}_instance.ppm",
        "depth": directory / f"{stem}_depth.bin",
    }


def write_view(directory: Path, index: int, view: RenderedView) -> list[Path]:
    """Write one view's image stack; return the written paths."""
    directory.mkdir(parents=True, exist_ok=True)
    paths = view_paths(directory, index)
    write_ppm(paths["rgb"], view.rgb)
    write_pgm(paths["semantic"], view.semantic)
    write_instance_ppm(paths["instance"], view.instance)
    write_depth(paths["depth"], view.depth)
    return list(paths.values())


def read_view(directory: Path, index: int) -> RenderedView:
    """Read one view's image stack."""
    paths = view_paths(directory, index)
    view = RenderedView(
        rgb=read_ppm(paths["rgb"]),
        semantic=read_pgm(paths["semantic"]),
        instance=read_instance_ppm(paths["instance"]),
        depth=read_depth(paths["depth"]),
    )
    _LOGGER.debug("Read view %s from %s", index, directory)
    return view
