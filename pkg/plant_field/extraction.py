"""Turn a trained field into a labeled point cloud."""

from __future__ import annotations

from dataclasses import dataclass, field
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):  # type: ignore[no-redef]
        """Backport of Python 3.11's enum.StrEnum."""

        def __str__(self) -> str:
            return str.__str__(self)

        def __format__(self, format_spec: str) -> str:
            return str.__format__(self, format_spec)

        @staticmethod
        def _generate_next_value_(name: str, start: int, count: int, last_values: list) -> str:
            return name.lower()
from typing import TYPE_CHECKING

import numpy as np
import torch
from plyfile import PlyData, PlyElement
from scipy.spatial import cKDTree
from skimage import measure

from .codec import decode_labels
from .const import (
    _LOGGER,
    CAMERA_FILTER_FRACTION,
    GRID_RESOLUTION,
    MAX_POINTS,
    SIGMA_THRESHOLD,
)
from .data import LabeledPointCloud, bounds_diagonal, make_rng
from .exceptions import InvalidInputError

if TYPE_CHECKING:
    from pathlib import Path

    from .codec import Codebooks
    from .data import Bounds, FloatArray
    from .field import JointField

MIN_GRID_RESOLUTION = 8
QUERY_CHUNK = 65536


class ExtractionStatus(StrEnum):
    """Outcome of an extraction."""

    OK = "ok"
    EMPTY = "empty"


@dataclass(frozen=True)
class ExtractionConfig:
    """Extraction settings."""

    resolution: int = GRID_RESOLUTION
    sigma_threshold: float = SIGMA_THRESHOLD
    max_points: int = MAX_POINTS
    camera_filter_fraction: float = CAMERA_FILTER_FRACTION
    seed: int = 0


@dataclass
class DensityGrid:
    """Density sampled at voxel centers of a regular grid."""

    values: FloatArray
    bounds: Bounds

    def __post_init__(self) -> None:
        """Validate the grid."""
        if min(self.values.shape) < MIN_GRID_RESOLUTION:
            msg = f"Grid resolution must be at least {MIN_GRID_RESOLUTION}"
            raise InvalidInputError(msg)

    @property
    def spacing(self) -> FloatArray:
        """Return the voxel size per axis."""
        lo, hi = self.bounds
        return (hi - lo) / np.asarray(self.values.shape)

    def voxel_centers(self) -> FloatArray:
        """Return all voxel centers in C order, (N, 3)."""
        return voxel_centers(self.bounds, self.values.shape[0])


@dataclass
class ExtractionResult:
    """Cloud plus the counts behind it."""

    cloud: LabeledPointCloud
    status: ExtractionStatus = ExtractionStatus.OK
    reason: str = ""
    diagnostics: dict[str, int | float] = field(default_factory=dict)


def voxel_centers(bounds: Bounds, resolution: int) -> FloatArray:
    """Return voxel centers of a cubic grid in C order."""
    lo, hi = bounds
    axes = [lo[d] + (np.arange(resolution) + 0.5) * (hi[d] - lo[d]) / resolution for d in range(3)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def bake_density(
    jfield: JointField, bounds: Bounds, resolution: int = GRID_RESOLUTION
) -> DensityGrid:
    """Evaluate density at every voxel center."""
    if resolution < MIN_GRID_RESOLUTION:
        msg = f"Grid resolution must be at least {MIN_GRID_RESOLUTION}"
        raise InvalidInputError(msg)
    centers = voxel_centers(bounds, resolution)
    values = np.empty(len(centers))
    with torch.no_grad():
        for start in range(0, len(centers), QUERY_CHUNK):
            chunk = torch.as_tensor(centers[start : start + QUERY_CHUNK], dtype=jfield.dtype)
            values[start : start + len(chunk)] = jfield.density(chunk).cpu().numpy()
    return DensityGrid(values=values.reshape(resolution, resolution, resolution), bounds=bounds)


def marching_cubes(grid: DensityGrid, threshold: float) -> FloatArray:
    """Return world-space isosurface vertices at a density threshold."""
    if threshold <= 0:
        msg = f"Density threshold must be positive, got {threshold}"
        raise InvalidInputError(msg)
    values = grid.values
    if not values.min() < threshold < values.max():
        return np.zeros((0, 3))
    vertices, _, _, _ = measure.marching_cubes(
        values, level=threshold, spacing=tuple(grid.spacing), method="lorensen"
    )
    return vertices + grid.bounds[0] + 0.5 * grid.spacing


def query_labels(
    jfield: JointField, points: FloatArray, directions: FloatArray
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Return (rgb, semantic, instance) field outputs in [0, 1]."""
    rgb = np.empty((len(points), 3))
    semantic = np.empty(len(points))
    instance = np.empty((len(points), 3))
    with torch.no_grad():
        for start in range(0, len(points), QUERY_CHUNK):
            stop = start + QUERY_CHUNK
            sample = jfield(
                torch.as_tensor(points[start:stop], dtype=jfield.dtype), directions[start:stop]
            )
            rgb[start:stop] = sample.rgb.cpu().numpy()
            semantic[start:stop] = sample.semantic.cpu().numpy()
            instance[start:stop] = sample.instance.cpu().numpy()
    return rgb, semantic, instance


def extract_cloud(  # noqa: PLR0913
    jfield: JointField,
    camera_centers: FloatArray,
    codebooks: Codebooks,
    bounds: Bounds,
    config: ExtractionConfig | None = None,
    grid: DensityGrid | None = None,
) -> ExtractionResult:
    """Bake, mesh, filter, subsample, query and decode."""
    config = config or ExtractionConfig()
    grid = grid or bake_density(jfield, bounds, config.resolution)
    vertices = marching_cubes(grid, config.sigma_threshold)
    diagnostics: dict[str, int | float] = {
        "vertices": len(vertices),
        "density_max": float(grid.values.max()),
    }
    if len(vertices) == 0:
        reason = (
            f"no voxel crosses density {config.sigma_threshold} "
            f"(max {diagnostics['density_max']:.4g}); threshold too high or field untrained"
        )
        _LOGGER.warning("Empty extraction: %s", reason)
        return ExtractionResult(
            LabeledPointCloud.empty(), ExtractionStatus.EMPTY, reason, diagnostics
        )

    centers = np.asarray(camera_centers, dtype=np.float64).reshape(-1, 3)
    radius = config.camera_filter_fraction * bounds_diagonal(bounds)
    distance, nearest = cKDTree(centers).query(vertices)
    keep = distance >= radius
    diagnostics["camera_filtered"] = int((~keep).sum())
    vertices, nearest = vertices[keep], nearest[keep]

    if len(vertices) > config.max_points:
        chosen = np.sort(make_rng(config.seed).choice(len(vertices), config.max_points, replace=False))
        diagnostics["subsampled"] = len(vertices) - config.max_points
        vertices, nearest = vertices[chosen], nearest[chosen]

    directions = vertices - centers[nearest]
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    rgb, semantic_values, instance_values = query_labels(jfield, vertices, directions)
    semantic, instance = decode_labels(semantic_values, instance_values, codebooks)
    consistent = (semantic == 0) == (instance == 0)
    diagnostics["inconsistent"] = int((~consistent).sum())
    cloud = LabeledPointCloud(
        positions=vertices[consistent],
        colors=np.clip(np.rint(rgb[consistent] * 255.0), 0, 255),
        semantic=semantic[consistent],
        instance=instance[consistent],
    )
    diagnostics["points"] = len(cloud)
    if len(cloud) == 0:
        reason = "every vertex was filtered near cameras or dropped as label-inconsistent"
        _LOGGER.warning("Empty extraction: %s", reason)
        return ExtractionResult(cloud, ExtractionStatus.EMPTY, reason, diagnostics)
    _LOGGER.debug("Extraction diagnostics: %s", diagnostics)
    return ExtractionResult(cloud, ExtractionStatus.OK, "", diagnostics)


PLY_DTYPE = [
    ("x", "f4"),
    ("y", "f4"),
    ("z", "f4"),
    ("red", "u1"),
    ("green", "u1"),
    ("blue", "u1"),
    ("semantic", "u1"),
    ("instance", "u4"),
]


def write_ply(path: Path, cloud: LabeledPointCloud, codebook_hash: str = "") -> None:
    """Write a labeled cloud as ASCII PLY."""
    vertex = np.empty(len(cloud), dtype=PLY_DTYPE)
    for axis, name in enumerate("xyz"):
        vertex[name] = cloud.positions[:, axis]
    for channel, name in enumerate(("red", "green", "blue")):
        vertex[name] = cloud.colors[:, channel]
    vertex["semantic"] = cloud.semantic
    vertex["instance"] = cloud.instance
    comments = [f"codebook {codebook_hash}"] if codebook_hash else []
    PlyData([PlyElement.describe(vertex, "vertex")], text=True, comments=comments).write(str(path))


def read_ply(path: Path) -> tuple[LabeledPointCloud, str]:
    """Read a labeled cloud and its codebook hash comment."""
    data = PlyData.read(str(path))
    vertex = data["vertex"].data
    codebook_hash = ""
    for comment in data.comments:
        if comment.startswith("codebook "):
            codebook_hash = comment.split(" ", 1)[1]
    cloud = LabeledPointCloud(
        positions=np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1),
        colors=np.stack([vertex["red"], vertex["green"], vertex["blue"]], axis=1),
        semantic=vertex["semantic"],
        instance=vertex["instance"],
    )
    return cloud, codebook_hash
