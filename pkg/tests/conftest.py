"""Fixtures for plant_field tests."""

from __future__ import annotations

import numpy as np
import pytest

from plant_field.camera import Intrinsics, Pose
from plant_field.const import CLASS_FRUIT, CLASS_LEAF, CLASS_STEM
from plant_field.scene import (
    CLASS_COLORS,
    OrganPrimitive,
    PrimitiveKind,
    RenderedView,
    SceneSpec,
)

MOCK_BOUNDS = (np.full(3, -0.5), np.full(3, 0.5))
MOCK_WIDTH = 40
MOCK_HEIGHT = 30


def pytest_addoption(parser: pytest.Parser) -> None:
    """Add the --run-slow switch."""
    parser.addoption("--run-slow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config: pytest.Config) -> None:
    """Register the slow marker."""
    config.addinivalue_line("markers", "slow: long acceptance runs")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    """Skip slow tests unless asked for."""
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def _make_sphere(
    instance_id: int = 1,
    center: tuple[float, float, float] = (0.0, 0.0, 0.0),
    radius: float = 0.2,
    semantic_class: int = CLASS_FRUIT,
) -> OrganPrimitive:
    """Return a sphere primitive."""
    return OrganPrimitive(
        kind=PrimitiveKind.SPHERE,
        semantic_class=semantic_class,
        instance_id=instance_id,
        center=np.asarray(center, dtype=np.float64),
        rotation=np.eye(3),
        sizes=(radius,),
        base_color=CLASS_COLORS.get(semantic_class, (0.5, 0.5, 0.5)),
    )


def _make_scene(*primitives: OrganPrimitive, bounds=MOCK_BOUNDS) -> SceneSpec:
    """Return a scene of the given primitives, or one centered sphere."""
    return SceneSpec(primitives=primitives or (_make_sphere(),), bounds=bounds)


def _make_three_organ_scene() -> SceneSpec:
    """Return a stem capsule with a leaf ellipsoid and a fruit sphere."""
    stem = OrganPrimitive(
        kind=PrimitiveKind.CAPSULE,
        semantic_class=CLASS_STEM,
        instance_id=1,
        center=np.array([0.0, 0.0, -0.1]),
        rotation=np.eye(3),
        sizes=(0.03, 0.25),
        base_color=CLASS_COLORS[CLASS_STEM],
    )
    leaf = OrganPrimitive(
        kind=PrimitiveKind.ELLIPSOID,
        semantic_class=CLASS_LEAF,
        instance_id=2,
        center=np.array([0.2, 0.0, 0.1]),
        rotation=np.eye(3),
        sizes=(0.15, 0.08, 0.02),
        base_color=CLASS_COLORS[CLASS_LEAF],
    )
    fruit = _make_sphere(instance_id=3, center=(-0.2, 0.0, 0.2), radius=0.1)
    return SceneSpec(primitives=(stem, leaf, fruit), bounds=MOCK_BOUNDS)


def _make_intrinsics(width: int = MOCK_WIDTH, height: int = MOCK_HEIGHT) -> Intrinsics:
    """Return centered intrinsics with a 50 degree field of view."""
    return Intrinsics.from_fov(width, height, 50.0)


def _make_pose(eye: tuple[float, float, float] = (2.0, 0.0, 0.0)) -> Pose:
    """Return a pose looking at the origin."""
    return Pose.look_at(np.asarray(eye, dtype=np.float64), np.zeros(3))


def _make_view(instance: np.ndarray, semantic: np.ndarray | None = None) -> RenderedView:
    """Return a view with flat color and unit depth around an instance map."""
    instance = np.asarray(instance, dtype=np.int64)
    if semantic is None:
        semantic = np.where(instance > 0, CLASS_LEAF, 0)
    return RenderedView(
        rgb=np.full((*instance.shape, 3), 128, dtype=np.uint8),
        semantic=np.asarray(semantic, dtype=np.uint8),
        instance=instance,
        depth=np.where(instance > 0, 1.0, np.inf),
    )


@pytest.fixture
def sphere_scene() -> SceneSpec:
    """Return a single centered sphere."""
    return _make_scene()


@pytest.fixture
def organ_scene() -> SceneSpec:
    """Return a three-organ scene."""
    return _make_three_organ_scene()


@pytest.fixture
def intrinsics() -> Intrinsics:
    """Return small test intrinsics."""
    return _make_intrinsics()
