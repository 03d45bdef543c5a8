"""Tests for point extraction from a field."""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING

import numpy as np
import pytest
import torch

from plant_field.codec import allocate_codebooks
from plant_field.const import CLASS_FRUIT, NUM_CLASSES
from plant_field.data import LabeledPointCloud, bounds_diagonal
from plant_field.exceptions import InvalidInputError
from plant_field.extraction import (
    DensityGrid,
    ExtractionConfig,
    ExtractionStatus,
    bake_density,
    extract_cloud,
    marching_cubes,
    read_ply,
    voxel_centers,
    write_ply,
)
from plant_field.field import FieldConfig, FieldSample, JointField

from .conftest import MOCK_BOUNDS

if TYPE_CHECKING:
    from pathlib import Path

SPHERE_RADIUS = 0.3


class _ConstantLabelField:
    """Field stub answering constant color, semantic level and instance code."""

    dtype = torch.float64

    def __init__(self, semantic: float, instance: tuple[float, float, float]) -> None:
        """Initialize the stub."""
        self.semantic = semantic
        self.instance = instance

    def __call__(self, xyz: torch.Tensor, directions: np.ndarray) -> FieldSample:
        """Return constant outputs for every point."""
        count = len(xyz)
        return FieldSample(
            sigma=torch.ones(count, dtype=self.dtype),
            rgb=torch.full((count, 3), 0.2, dtype=self.dtype),
            instance=torch.tensor(self.instance, dtype=self.dtype).expand(count, 3),
            semantic=torch.full((count,), self.semantic, dtype=self.dtype),
        )


def _sphere_grid(resolution: int = 32) -> DensityGrid:
    """Return a density grid that crosses 10 on a sphere of radius 0.3."""
    centers = voxel_centers(MOCK_BOUNDS, resolution)
    radius = np.linalg.norm(centers, axis=1)
    values = 10.0 + 10.0 * (SPHERE_RADIUS - radius)
    return DensityGrid(values=values.reshape(resolution, resolution, resolution), bounds=MOCK_BOUNDS)


def test_sphere_vertices_lie_on_isosurface() -> None:
    """Test vertex radii sit within half a voxel of the true sphere."""
    grid = _sphere_grid()

    vertices = marching_cubes(grid, 10.0)

    assert len(vertices) > 100
    radii = np.linalg.norm(vertices, axis=1)
    assert np.abs(radii - SPHERE_RADIUS).max() < 0.5 * grid.spacing[0]


def test_planar_step_vertices_at_midplane() -> None:
    """Test a density step across x = 0 meshes to the plane x = 0."""
    resolution = 16
    centers = voxel_centers(MOCK_BOUNDS, resolution)
    values = np.where(centers[:, 0] < 0, 20.0, 0.0).reshape(resolution, resolution, resolution)

    vertices = marching_cubes(DensityGrid(values=values, bounds=MOCK_BOUNDS), 10.0)

    assert len(vertices) > 0
    np.testing.assert_allclose(vertices[:, 0], 0.0, atol=1e-9)


def test_threshold_outside_range_gives_no_vertices() -> None:
    """Test thresholds above the grid maximum mesh nothing and non-positive ones raise."""
    grid = _sphere_grid(8)

    assert marching_cubes(grid, 100.0).shape == (0, 3)
    with pytest.raises(InvalidInputError):
        marching_cubes(grid, 0.0)


def test_grid_resolution_floor() -> None:
    """Test grids coarser than eight voxels raise."""
    with pytest.raises(InvalidInputError):
        DensityGrid(values=np.zeros((4, 4, 4)), bounds=MOCK_BOUNDS)


def test_voxel_centers_order() -> None:
    """Test centers run in C order from the lower corner."""
    centers = voxel_centers(MOCK_BOUNDS, 8)

    assert centers.shape == (512, 3)
    np.testing.assert_allclose(centers[0], [-0.4375, -0.4375, -0.4375])
    np.testing.assert_allclose(centers[1], [-0.4375, -0.4375, -0.3125])
    np.testing.assert_allclose(centers[-1], [0.4375, 0.4375, 0.4375])


def test_bake_density_matches_field() -> None:
    """Test baking evaluates the field at every voxel center."""
    config = FieldConfig(levels=2, min_resolution=4, max_resolution=8, hidden_width=8, dtype="float64")
    jfield = JointField(MOCK_BOUNDS, config, seed=0)

    grid = bake_density(jfield, MOCK_BOUNDS, 8)

    assert grid.values.shape == (8, 8, 8)
    expected = jfield.density(torch.as_tensor(voxel_centers(MOCK_BOUNDS, 8))).detach().numpy()
    np.testing.assert_allclose(grid.values.ravel(), expected)
    with pytest.raises(InvalidInputError):
        bake_density(jfield, MOCK_BOUNDS, 4)


def test_extract_cloud_labels_and_filters() -> None:
    """Test extraction decodes labels, drops vertices near cameras and caps the count."""
    codebooks = allocate_codebooks(NUM_CLASSES, [1])
    level = codebooks.semantic.levels[CLASS_FRUIT] / 255.0
    jfield = _ConstantLabelField(level, (1.0, 1.0, 1.0))
    cameras = np.array([[2.0, 0.0, 0.0], [SPHERE_RADIUS, 0.0, 0.0]])
    config = ExtractionConfig(max_points=50, seed=3)

    result = extract_cloud(jfield, cameras, codebooks, MOCK_BOUNDS, config, grid=_sphere_grid())

    assert result.status == ExtractionStatus.OK
    assert len(result.cloud) == 50
    assert result.diagnostics["camera_filtered"] > 0
    assert result.diagnostics["subsampled"] > 0
    assert result.diagnostics["points"] == 50
    assert set(result.cloud.semantic.tolist()) == {CLASS_FRUIT}
    assert set(result.cloud.instance.tolist()) == {1}
    assert (result.cloud.colors == 51).all()
    radius = config.camera_filter_fraction * bounds_diagonal(MOCK_BOUNDS)
    distance = np.linalg.norm(result.cloud.positions - cameras[1], axis=1)
    assert (distance >= radius).all()


def test_extract_cloud_subsample_is_deterministic() -> None:
    """Test the same seed keeps the same vertices."""
    codebooks = allocate_codebooks(NUM_CLASSES, [1])
    jfield = _ConstantLabelField(codebooks.semantic.levels[CLASS_FRUIT] / 255.0, (1.0, 1.0, 1.0))
    config = ExtractionConfig(max_points=20, seed=1)
    cameras = np.array([[2.0, 0.0, 0.0]])

    first = extract_cloud(jfield, cameras, codebooks, MOCK_BOUNDS, config, grid=_sphere_grid())
    second = extract_cloud(jfield, cameras, codebooks, MOCK_BOUNDS, config, grid=_sphere_grid())

    np.testing.assert_array_equal(first.cloud.positions, second.cloud.positions)


def test_inconsistent_labels_are_dropped(caplog: pytest.LogCaptureFixture) -> None:
    """Test points decoding to background class with an instance id are removed."""
    codebooks = allocate_codebooks(NUM_CLASSES, [1])
    jfield = _ConstantLabelField(0.0, (1.0, 1.0, 1.0))

    with caplog.at_level(logging.WARNING):
        result = extract_cloud(
            jfield, np.array([[2.0, 0.0, 0.0]]), codebooks, MOCK_BOUNDS, grid=_sphere_grid()
        )

    assert result.status == ExtractionStatus.EMPTY
    assert result.diagnostics["inconsistent"] == result.diagnostics["vertices"]
    assert len(result.cloud) == 0
    assert "Empty extraction" in caplog.text


def test_untrained_field_reports_empty() -> None:
    """Test a grid that never reaches the threshold yields an empty result with a reason."""
    codebooks = allocate_codebooks(NUM_CLASSES, [1])
    grid = DensityGrid(values=np.ones((8, 8, 8)), bounds=MOCK_BOUNDS)

    result = extract_cloud(
        _ConstantLabelField(0.5, (1.0, 1.0, 1.0)),
        np.array([[2.0, 0.0, 0.0]]),
        codebooks,
        MOCK_BOUNDS,
        grid=grid,
    )

    assert result.status == ExtractionStatus.EMPTY
    assert "threshold" in result.reason
    assert result.diagnostics["vertices"] == 0


def test_ply_round_trip_keeps_codebook_hash(tmp_path: Path) -> None:
    """Test labeled clouds and the codebook comment survive PLY."""
    cloud = LabeledPointCloud(
        positions=np.array([[0.125, -0.25, 0.5], [0.0, 0.0, 0.0]]),
        colors=np.array([[255, 0, 10], [1, 2, 3]]),
        semantic=np.array([2, 0]),
        instance=np.array([70000, 0]),
    )
    path = tmp_path / "cloud.ply"

    write_ply(path, cloud, "abc123")
    restored, codebook_hash = read_ply(path)

    assert codebook_hash == "abc123"
    assert path.read_text().startswith("ply\nformat ascii 1.0")
    np.testing.assert_array_equal(restored.positions, cloud.positions)
    np.testing.assert_array_equal(restored.colors, cloud.colors)
    np.testing.assert_array_equal(restored.semantic, cloud.semantic)
    np.testing.assert_array_equal(restored.instance, cloud.instance)


def test_zero_density_grid_reports_empty() -> None:
    """Test an all-zero grid, below any field's density, yields an empty result."""
    codebooks = allocate_codebooks(NUM_CLASSES, [1])
    config = FieldConfig(levels=2, min_resolution=4, max_resolution=8, hidden_width=8, dtype="float64")
    baked = bake_density(JointField(MOCK_BOUNDS, config, seed=0), MOCK_BOUNDS, 8)
    grid = DensityGrid(values=np.zeros((8, 8, 8)), bounds=MOCK_BOUNDS)

    result = extract_cloud(
        _ConstantLabelField(0.5, (1.0, 1.0, 1.0)),
        np.array([[2.0, 0.0, 0.0]]),
        codebooks,
        MOCK_BOUNDS,
        grid=grid,
    )

    assert baked.values.min() > 0
    assert result.status == ExtractionStatus.EMPTY
    assert result.diagnostics == {"vertices": 0, "density_max": 0.0}
    assert len(result.cloud) == 0
