"""Analytic plant scenes: organ primitives, label rendering and surface sampling."""

from __future__ import annotations

import math
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
from typing import TYPE_CHECKING, Any, TypeAlias

import numpy as np
from scipy.special import elliprg

from .camera import pixel_centers, pixel_directions
from .const import (
    _LOGGER,
    CLASS_BY_NAME,
    CLASS_FLOWER,
    CLASS_FRUIT,
    CLASS_LEAF,
    CLASS_STEM,
    SEMANTIC_CLASSES,
)
from .data import LabeledPointCloud, as_bounds, make_rng
from .exceptions import InvalidInputError, SceneError

if TYPE_CHECKING:
    from collections.abc import Callable, Mapping

    from .camera import Intrinsics, Pose
    from .data import Bounds, ByteImage, FloatArray, LabelImage

MAX_PLACEMENT_ATTEMPTS = 1000
MIN_SHADE = 0.2
HIT_EPSILON = 1e-9

DEFAULT_BOUNDS: Bounds = (np.full(3, -0.5), np.full(3, 0.5))
DEFAULT_LIGHT = (0.3, -0.4, 1.0)

CLASS_COLORS: dict[int, tuple[float, float, float]] = {
    CLASS_STEM: (0.45, 0.60, 0.25),
    CLASS_LEAF: (0.20, 0.65, 0.20),
    CLASS_FRUIT: (0.85, 0.25, 0.15),
    CLASS_FLOWER: (0.95, 0.85, 0.30),
}


class PrimitiveKind(StrEnum):
    """Analytic organ shapes."""

    CAPSULE = "capsule"
    ELLIPSOID = "ellipsoid"
    SPHERE = "sphere"


Sizes: TypeAlias = "tuple[float, ...]"


def _quadratic_roots(
    a: FloatArray, b: FloatArray, c: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """Return both roots of a*t^2 + b*t + c, inf where there are none."""
    disc = b * b - 4.0 * a * c
    real = (disc >= 0) & (a > 1e-15)
    root = np.sqrt(np.where(real, disc, 0.0))
    denom = np.where(real, 2.0 * a, 1.0)
    near = np.where(real, (-b - root) / denom, np.inf)
    far = np.where(real, (-b + root) / denom, np.inf)
    return near, far


def _first_positive(*candidates: FloatArray) -> FloatArray:
    """Return the smallest strictly positive candidate per ray."""
    stacked = np.stack(candidates)
    return np.where(stacked > HIT_EPSILON, stacked, np.inf).min(axis=0)


def _sphere_hit(origins: FloatArray, dirs: FloatArray, radius: float) -> tuple[FloatArray, FloatArray]:
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * np.einsum("ij,ij->i", origins, dirs)
    c = np.einsum("ij,ij->i", origins, origins) - radius * radius
    return _quadratic_roots(a, b, c)


def _intersect_sphere(origins: FloatArray, dirs: FloatArray, sizes: Sizes) -> FloatArray:
    return _first_positive(*_sphere_hit(origins, dirs, sizes[0]))


def _intersect_ellipsoid(origins: FloatArray, dirs: FloatArray, sizes: Sizes) -> FloatArray:
    axes = np.asarray(sizes)
    # Scaling to the unit sphere keeps the ray parameter t.
    return _first_positive(*_sphere_hit(origins / axes, dirs / axes, 1.0))


def _intersect_capsule(origins: FloatArray, dirs: FloatArray, sizes: Sizes) -> FloatArray:
    radius, half = sizes
    a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
    b = 2.0 * (origins[:, 0] * dirs[:, 0] + origins[:, 1] * dirs[:, 1])
    c = origins[:, 0] ** 2 + origins[:, 1] ** 2 - radius * radius
    candidates = []
    for t in _quadratic_roots(a, b, c):
        z = origins[:, 2] + np.where(np.isfinite(t), t, 0.0) * dirs[:, 2]
        candidates.append(np.where(np.abs(z) <= half, t, np.inf))
    for sign in (1.0, -1.0):
        cap = np.array([0.0, 0.0, sign * half])
        for t in _sphere_hit(origins - cap, dirs, radius):
            z = origins[:, 2] + np.where(np.isfinite(t), t, 0.0) * dirs[:, 2]
            candidates.append(np.where(sign * z >= half, t, np.inf))
    return _first_positive(*candidates)


def _capsule_axis_point(points: FloatArray, half: float) -> FloatArray:
    axis = np.zeros_like(points)
    axis[:, 2] = np.clip(points[:, 2], -half, half)
    return axis


def _normalize(vectors: FloatArray) -> FloatArray:
    norm = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return vectors / np.where(norm > 0, norm, 1.0)


def _ellipsoid_distance(points: FloatArray, sizes: Sizes) -> FloatArray:
    """Exact unsigned distance to an ellipsoid surface by bisection."""
    axes = np.asarray(sizes, dtype=np.float64)
    order = np.argsort(-axes)
    e = axes[order]
    y = np.abs(points[:, order])
    y[:, 2] = np.maximum(y[:, 2], 1e-12)
    e2 = e * e
    low = -e2[2] + e[2] * y[:, 2]
    high = -e2[2] + np.linalg.norm(e * y, axis=1)
    for _ in range(80):
        mid = 0.5 * (low + high)
        value = np.sum((e * y / (mid[:, None] + e2)) ** 2, axis=1) - 1.0
        low = np.where(value > 0, mid, low)
        high = np.where(value > 0, high, mid)
    t = 0.5 * (low + high)
    closest = e2 * y / (t[:, None] + e2)
    return np.linalg.norm(closest - y, axis=1)


def _sample_unit_sphere(count: int, rng: np.random.Generator) -> FloatArray:
    return _normalize(rng.standard_normal((count, 3)))


def _sample_sphere(count: int, sizes: Sizes, rng: np.random.Generator) -> FloatArray:
    return sizes[0] * _sample_unit_sphere(count, rng)


def _sample_capsule(count: int, sizes: Sizes, rng: np.random.Generator) -> FloatArray:
    radius, half = sizes
    side = 4.0 * math.pi * radius * half
    caps = 4.0 * math.pi * radius * radius
    on_side = rng.random(count) < side / (side + caps)
    points = np.empty((count, 3))
    n_side = int(on_side.sum())
    theta = rng.uniform(0.0, 2.0 * math.pi, n_side)
    points[on_side] = np.stack(
        [radius * np.cos(theta), radius * np.sin(theta), rng.uniform(-half, half, n_side)],
        axis=1,
    )
    cap_dirs = _sample_unit_sphere(count - n_side, rng)
    cap_points = radius * cap_dirs
    cap_points[:, 2] += np.where(cap_dirs[:, 2] >= 0, half, -half)
    points[~on_side] = cap_points
    return points


def _sample_ellipsoid(count: int, sizes: Sizes, rng: np.random.Generator) -> FloatArray:
    """Sample the surface uniformly by rejection on the area element."""
    axes = np.asarray(sizes)
    accepted: list[FloatArray] = []
    remaining = count
    while remaining > 0:
        draw = max(2 * remaining, 16)
        unit = _sample_unit_sphere(draw, rng)
        weight = np.linalg.norm(unit / axes, axis=1) * axes.min()
        keep = unit[rng.random(draw) < weight][:remaining]
        accepted.append(keep * axes)
        remaining -= len(keep)
    return np.concatenate(accepted) if accepted else np.zeros((0, 3))


@dataclass(frozen=True, kw_only=True)
class ShapeDescription:
    """Describe the local-frame analytics of one primitive kind."""

    key: PrimitiveKind
    size_count: int
    intersect_fn: Callable[[FloatArray, FloatArray, Sizes], FloatArray]
    normal_fn: Callable[[FloatArray, Sizes], FloatArray]
    contains_fn: Callable[[FloatArray, Sizes], np.ndarray]
    distance_fn: Callable[[FloatArray, Sizes], FloatArray]
    area_fn: Callable[[Sizes], float]
    sample_fn: Callable[[int, Sizes, np.random.Generator], FloatArray]
    half_extent_fn: Callable[[FloatArray, Sizes], FloatArray]
    radius_fn: Callable[[Sizes], float]


SHAPE_DESCRIPTIONS: tuple[ShapeDescription, ...] = (
    ShapeDescription(
        key=PrimitiveKind.SPHERE,
        size_count=1,
        intersect_fn=_intersect_sphere,
        normal_fn=lambda p, s: _normalize(p),
        contains_fn=lambda p, s: np.linalg.norm(p, axis=1) < s[0],
        distance_fn=lambda p, s: np.abs(np.linalg.norm(p, axis=1) - s[0]),
        area_fn=lambda s: 4.0 * math.pi * s[0] ** 2,
        sample_fn=_sample_sphere,
        half_extent_fn=lambda rot, s: np.full(3, s[0]),
        radius_fn=lambda s: s[0],
    ),
    ShapeDescription(
        key=PrimitiveKind.ELLIPSOID,
        size_count=3,
        intersect_fn=_intersect_ellipsoid,
        normal_fn=lambda p, s: _normalize(p / np.square(s)),
        contains_fn=lambda p, s: np.sum((p / np.asarray(s)) ** 2, axis=1) < 1.0,
        distance_fn=_ellipsoid_distance,
        area_fn=lambda s: float(
            4.0 * math.pi * s[0] * s[1] * s[2]
            * elliprg(s[0] ** -2, s[1] ** -2, s[2] ** -2)
        ),
        sample_fn=_sample_ellipsoid,
        half_extent_fn=lambda rot, s: np.sqrt(((rot * np.asarray(s)) ** 2).sum(axis=1)),
        radius_fn=lambda s: max(s),
    ),
    ShapeDescription(
        key=PrimitiveKind.CAPSULE,
        size_count=2,
        intersect_fn=_intersect_capsule,
        normal_fn=lambda p, s: _normalize(p - _capsule_axis_point(p, s[1])),
        contains_fn=lambda p, s: np.linalg.norm(p - _capsule_axis_point(p, s[1]), axis=1) < s[0],
        distance_fn=lambda p, s: np.abs(
            np.linalg.norm(p - _capsule_axis_point(p, s[1]), axis=1) - s[0]
        ),
        area_fn=lambda s: 4.0 * math.pi * s[0] * s[1] + 4.0 * math.pi * s[0] ** 2,
        sample_fn=_sample_capsule,
        half_extent_fn=lambda rot, s: np.abs(rot[:, 2]) * s[1] + s[0],
        radius_fn=lambda s: s[0] + s[1],
    ),
)
SHAPES: dict[PrimitiveKind, ShapeDescription] = {d.key: d for d in SHAPE_DESCRIPTIONS}


@dataclass(frozen=True, eq=False)
class OrganPrimitive:
    """One organ as an analytic solid.

    `rotation` maps local axes to world (columns are the local axes). Sizes are
    (radius,) for spheres, (a, b, c) semi-axes for ellipsoids and
    (radius, half_length) for capsules whose axis is local z.
    """

    kind: PrimitiveKind
    semantic_class: int
    instance_id: int
    center: FloatArray
    rotation: FloatArray
    sizes: Sizes
    base_color: tuple[float, float, float]

    def __post_init__(self) -> None:
        """Validate and freeze the primitive."""
        kind = PrimitiveKind(self.kind)
        sizes = tuple(float(s) for s in self.sizes)
        if len(sizes) != SHAPES[kind].size_count or min(sizes) <= 0:
            msg = f"Invalid sizes {sizes} for {kind}"
            raise SceneError(msg)
        if self.semantic_class not in SEMANTIC_CLASSES:
            msg = f"Invalid semantic class {self.semantic_class}"
            raise SceneError(msg)
        if self.instance_id < 1:
            msg = f"Instance id must be positive, got {self.instance_id}"
            raise SceneError(msg)
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > 1e-9:
            msg = "Primitive rotation is not orthonormal"
            raise SceneError(msg)
        center.setflags(write=False)
        rotation.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "base_color", tuple(float(c) for c in self.base_color))

    @property
    def shape(self) -> ShapeDescription:
        """Return the shape description."""
        return SHAPES[self.kind]

    def to_local(self, points: FloatArray) -> FloatArray:
        """Map world points into the primitive frame."""
        return (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center) @ self.rotation

    def intersect(self, origins: FloatArray, directions: FloatArray) -> FloatArray:
        """Return the nearest positive hit distance per ray, inf on a miss."""
        local_dirs = np.asarray(directions, dtype=np.float64).reshape(-1, 3) @ self.rotation
        return self.shape.intersect_fn(self.to_local(origins), local_dirs, self.sizes)

    def normals(self, points: FloatArray) -> FloatArray:
        """Return outward world normals at surface points."""
        return self.shape.normal_fn(self.to_local(points), self.sizes) @ self.rotation.T

    def contains(self, points: FloatArray) -> np.ndarray:
        """Return which points are strictly inside the solid."""
        return self.shape.contains_fn(self.to_local(points), self.sizes)

    def surface_distance(self, points: FloatArray) -> FloatArray:
        """Return the unsigned distance from points to the surface."""
        return self.shape.distance_fn(self.to_local(points), self.sizes)

    def area(self) -> float:
        """Return the exact surface area."""
        return float(self.shape.area_fn(self.sizes))

    def sample_surface(self, count: int, rng: np.random.Generator) -> FloatArray:
        """Draw uniformly distributed world points on the surface."""
        local = self.shape.sample_fn(count, self.sizes, rng)
        return local @ self.rotation.T + self.center

    def half_extent(self) -> FloatArray:
        """Return the half sizes of the tight axis-aligned bounding box."""
        return self.shape.half_extent_fn(self.rotation, self.sizes)

    def bounding_radius(self) -> float:
        """Return the radius of a sphere around the center enclosing the solid."""
        return float(self.shape.radius_fn(self.sizes))

    def inside_bounds(self, bounds: Bounds) -> bool:
        """Return whether the solid lies inside an axis-aligned box."""
        lo, hi = bounds
        extent = self.half_extent()
        return bool(np.all(self.center - extent >= lo) and np.all(self.center + extent <= hi))


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Immutable analytic scene."""

    primitives: tuple[OrganPrimitive, ...]
    bounds: Bounds
    light_direction: FloatArray = field(default_factory=lambda: _normalize(np.array(DEFAULT_LIGHT)))

    def __post_init__(self) -> None:
        """Validate the scene."""
        primitives = tuple(self.primitives)
        if not primitives:
            msg = "A scene needs at least one primitive"
            raise SceneError(msg)
        ids = [p.instance_id for p in primitives]
        if len(set(ids)) != len(ids):
            msg = f"Duplicate instance ids in scene: {sorted(ids)}"
            raise SceneError(msg)
        bounds = as_bounds(*self.bounds)
        outside = [p.instance_id for p in primitives if not p.inside_bounds(bounds)]
        if outside:
            msg = f"Primitives {outside} extend outside the scene bounds"
            raise SceneError(msg)
        light = np.asarray(self.light_direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(light) - 1.0) > 1e-9:
            msg = "Light direction must be a unit vector"
            raise SceneError(msg)
        object.__setattr__(self, "primitives", primitives)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "light_direction", light)

    @property
    def instance_ids(self) -> list[int]:
        """Return the sorted instance ids."""
        return sorted(p.instance_id for p in self.primitives)

    def primitive(self, instance_id: int) -> OrganPrimitive:
        """Return the primitive with an instance id."""
        for primitive in self.primitives:
            if primitive.instance_id == instance_id:
                return primitive
        msg = f"No primitive with instance id {instance_id}"
        raise KeyError(msg)

    def shade(self, primitive: OrganPrimitive, points: FloatArray) -> FloatArray:
        """Return clamped Lambertian colors in [0, 1] at surface points."""
        lambert = np.clip(primitive.normals(points) @ self.light_direction, MIN_SHADE, 1.0)
        return lambert[:, None] * np.asarray(primitive.base_color)[None, :]


@dataclass
class RenderedView:
    """Label images of one view; depth is the distance along the pixel ray."""

    rgb: ByteImage
    semantic: ByteImage
    instance: LabelImage
    depth: FloatArray

    @property
    def shape(self) -> tuple[int, int]:
        """Return (height, width)."""
        return self.instance.shape

    def copy(self) -> RenderedView:
        """Return a deep copy."""
        return RenderedView(
            rgb=self.rgb.copy(),
            semantic=self.semantic.copy(),
            instance=self.instance.copy(),
            depth=self.depth.copy(),
        )

    def instance_ids(self) -> list[int]:
        """Return the sorted nonzero instance ids present."""
        ids = np.unique(self.instance)
        return [int(i) for i in ids if i != 0]


def _to_bytes(colors: FloatArray) -> ByteImage:
    return np.clip(np.rint(colors * 255.0), 0, 255).astype(np.uint8)


def cast_rays(
    scene: SceneSpec, origins: FloatArray, directions: FloatArray
) -> tuple[FloatArray, np.ndarray]:
    """Return the nearest hit distance and primitive index per ray (-1 on a miss)."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape)
    best_t = np.full(len(directions), np.inf)
    best = np.full(len(directions), -1, dtype=np.int64)
    for index, primitive in enumerate(scene.primitives):
        t = primitive.intersect(origins, directions)
        closer = t < best_t
        best_t[closer] = t[closer]
        best[closer] = index
    return best_t, best


def render_view(scene: SceneSpec, intr: Intrinsics, pose: Pose) -> RenderedView:
    """Ray-cast every pixel center against the scene."""
    directions = pixel_directions(pixel_centers(intr), intr, pose)
    origin = pose.center
    depth, hit_index = cast_rays(scene, origin, directions)
    count = len(directions)
    rgb = np.zeros((count, 3), dtype=np.uint8)
    semantic = np.zeros(count, dtype=np.uint8)
    instance = np.zeros(count, dtype=np.int64)
    for index, primitive in enumerate(scene.primitives):
        mask = hit_index == index
        if not mask.any():
            continue
        points = origin + depth[mask, None] * directions[mask]
        rgb[mask] = _to_bytes(scene.shade(primitive, points))
        semantic[mask] = primitive.semantic_class
        instance[mask] = primitive.instance_id
    shape = (intr.height, intr.width)
    _LOGGER.debug(
        "Rendered %sx%s view with %s foreground pixels",
        intr.width,
        intr.height,
        int((instance > 0).sum()),
    )
    return RenderedView(
        rgb=rgb.reshape(*shape, 3),
        semantic=semantic.reshape(shape),
        instance=instance.reshape(shape),
        depth=depth.reshape(shape),
    )


def sample_gt_cloud(scene: SceneSpec, n: int, seed: int) -> LabeledPointCloud:
    """Sample n labeled points uniformly over the outer surface of the scene."""
    if n < 1:
        msg = f"Sample count must be positive, got {n}"
        raise InvalidInputError(msg)
    rng = make_rng(seed)
    areas = np.array([p.area() for p in scene.primitives])
    shares = areas / areas.sum()
    chunks: list[LabeledPointCloud] = []
    remaining = n
    for _ in range(100):
        if remaining <= 0:
            break
        counts = rng.multinomial(remaining, shares)
        for index, primitive in enumerate(scene.primitives):
            if counts[index] == 0:
                continue
            points = primitive.sample_surface(int(counts[index]), rng)
            buried = np.zeros(len(points), dtype=bool)
            for other_index, other in enumerate(scene.primitives):
                if other_index != index:
                    buried |= other.contains(points)
            points = points[~buried][:remaining]
            if len(points) == 0:
                continue
            chunks.append(
                LabeledPointCloud(
                    positions=points,
                    colors=_to_bytes(scene.shade(primitive, points)),
                    semantic=np.full(len(points), primitive.semantic_class),
                    instance=np.full(len(points), primitive.instance_id),
                )
            )
            remaining -= len(points)
    if remaining > 0:
        msg = "Scene surface is entirely buried; cannot sample"
        raise SceneError(msg)
    return LabeledPointCloud(
        positions=np.concatenate([c.positions for c in chunks]),
        colors=np.concatenate([c.colors for c in chunks]),
        semantic=np.concatenate([c.semantic for c in chunks]),
        instance=np.concatenate([c.instance for c in chunks]),
    )


def _normalize_counts(organ_counts: Mapping[str | int, int]) -> dict[int, int]:
    counts = dict.fromkeys(SEMANTIC_CLASSES, 0)
    for key, value in organ_counts.items():
        cls = CLASS_BY_NAME.get(key, key) if isinstance(key, str) else int(key)
        if cls not in SEMANTIC_CLASSES:
            msg = f"Unknown organ class {key!r}"
            raise SceneError(msg)
        if value < 0:
            msg = f"Organ count for {key!r} must be non-negative"
            raise SceneError(msg)
        counts[cls] = int(value)
    return counts


def _frame_from_axis(axis: FloatArray, azimuth: float) -> FloatArray:
    """Return a rotation whose local x is `axis`, y horizontal."""
    x = _normalize(axis)
    y = np.array([-math.sin(azimuth), math.cos(azimuth), 0.0])
    y = _normalize(y - (y @ x) * x)
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=1)


def _capsule_frame(axis: FloatArray) -> FloatArray:
    """Return a rotation whose local z is `axis`."""
    z = _normalize(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = _normalize(np.cross(helper, z))
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


class _PlantBuilder:
    """Rejection placement of organs inside the bounds."""

    def __init__(self, rng: np.random.Generator, bounds: Bounds) -> None:
        """Initialize the builder."""
        self.rng = rng
        self.bounds = bounds
        lo, hi = bounds
        self.scale = float(np.min(hi - lo))
        self.base = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, lo[2] + 0.05 * (hi[2] - lo[2])])
        self.height = float(hi[2] - lo[2])
        self.stem_radius = 0.02 * self.scale
        self.attempts = 0
        self.stems: list[OrganPrimitive] = []
        self.organs: list[OrganPrimitive] = []
        self.anchors: list[tuple[FloatArray, FloatArray]] = []

    def _attempt(self) -> None:
        self.attempts += 1
        if self.attempts > MAX_PLACEMENT_ATTEMPTS:
            msg = f"Could not pack organs into bounds after {MAX_PLACEMENT_ATTEMPTS} attempts"
            raise SceneError(msg)

    def _color(self, cls: int) -> tuple[float, float, float]:
        jitter = self.rng.uniform(-0.05, 0.05, 3)
        return tuple(np.clip(np.asarray(CLASS_COLORS[cls]) + jitter, 0.0, 1.0).tolist())

    def build_stems(self, count: int) -> None:
        """Grow a connected chain of capsules from the base."""
        if count == 0:
            top = self.base + np.array([0.0, 0.0, 0.75 * self.height])
            self.anchors = [(self.base, top)]
            return
        length = 0.75 * self.height / count
        while True:
            self._attempt()
            start = self.base.copy()
            chain = []
            for _ in range(count):
                tilt = math.radians(self.rng.uniform(0.0, 12.0))
                azimuth = self.rng.uniform(0.0, 2.0 * math.pi)
                axis = np.array(
                    [
                        math.sin(tilt) * math.cos(azimuth),
                        math.sin(tilt) * math.sin(azimuth),
                        math.cos(tilt),
                    ]
                )
                end = start + length * axis
                chain.append((start, end))
                start = end
            stems = [
                OrganPrimitive(
                    kind=PrimitiveKind.CAPSULE,
                    semantic_class=CLASS_STEM,
                    instance_id=1,
                    center=(a + b) / 2,
                    rotation=_capsule_frame(b - a),
                    sizes=(self.stem_radius, length / 2),
                    base_color=CLASS_COLORS[CLASS_STEM],
                )
                for a, b in chain
            ]
            if all(s.inside_bounds(self.bounds) for s in stems):
                self.stems = stems
                self.anchors = chain
                return

    def _anchor(self, low: float, high: float) -> FloatArray:
        position = self.rng.uniform(low, high) * len(self.anchors)
        index = min(int(position), len(self.anchors) - 1)
        start, end = self.anchors[index]
        return start + (position - index) * (end - start)

    def _fits(self, candidate: OrganPrimitive) -> bool:
        if not candidate.inside_bounds(self.bounds):
            return False
        radius = candidate.bounding_radius()
        return all(
            np.linalg.norm(candidate.center - other.center)
            > radius + other.bounding_radius()
            for other in self.organs
        )

    def _candidate(self, cls: int) -> OrganPrimitive:
        azimuth = self.rng.uniform(0.0, 2.0 * math.pi)
        horizontal = np.array([math.cos(azimuth), math.sin(azimuth), 0.0])
        s = self.scale
        if cls == CLASS_LEAF:
            anchor = self._anchor(0.25, 1.0)
            tilt = math.radians(self.rng.uniform(10.0, 35.0))
            axis = math.cos(tilt) * horizontal + np.array([0.0, 0.0, math.sin(tilt)])
            a = self.rng.uniform(0.10, 0.16) * s
            sizes: Sizes = (a, self.rng.uniform(0.045, 0.07) * s, 0.012 * s)
            return OrganPrimitive(
                kind=PrimitiveKind.ELLIPSOID,
                semantic_class=cls,
                instance_id=1,
                center=anchor + 0.9 * a * axis,
                rotation=_frame_from_axis(axis, azimuth),
                sizes=sizes,
                base_color=self._color(cls),
            )
        if cls == CLASS_FRUIT:
            anchor = self._anchor(0.3, 1.0)
            sizes = (0.05 * s, 0.05 * s, 0.065 * s)
            return OrganPrimitive(
                kind=PrimitiveKind.ELLIPSOID,
                semantic_class=cls,
                instance_id=1,
                center=anchor + 0.07 * s * horizontal - np.array([0.0, 0.0, 0.04 * s]),
                rotation=np.eye(3),
                sizes=sizes,
                base_color=self._color(cls),
            )
        anchor = self._anchor(0.7, 1.0)
        return OrganPrimitive(
            kind=PrimitiveKind.SPHERE,
            semantic_class=cls,
            instance_id=1,
            center=anchor + 0.05 * s * horizontal + np.array([0.0, 0.0, 0.03 * s]),
            rotation=np.eye(3),
            sizes=(0.04 * s,),
            base_color=self._color(cls),
        )

    def place(self, cls: int) -> None:
        """Place one organ of a class, retrying until it fits."""
        while True:
            self._attempt()
            candidate = self._candidate(cls)
            if self._fits(candidate):
                self.organs.append(candidate)
                return

    def primitives(self) -> tuple[OrganPrimitive, ...]:
        """Return the placed primitives with sequential ids, stems first."""
        return tuple(
            OrganPrimitive(
                kind=p.kind,
                semantic_class=p.semantic_class,
                instance_id=index,
                center=p.center,
                rotation=p.rotation,
                sizes=p.sizes,
                base_color=p.base_color,
            )
            for index, p in enumerate(self.stems + self.organs, start=1)
        )


def build_plant(
    seed: int,
    organ_counts: Mapping[str | int, int],
    bounds: Bounds = DEFAULT_BOUNDS,
) -> SceneSpec:
    """Build a plant of capsule stems with leaves, fruits and flowers attached."""
    counts = _normalize_counts(organ_counts)
    if sum(counts.values()) < 1:
        msg = "A plant needs at least one organ"
        raise SceneError(msg)
    bounds = as_bounds(*bounds)
    builder = _PlantBuilder(make_rng(seed), bounds)
    builder.build_stems(counts[CLASS_STEM])
    for cls in (CLASS_LEAF, CLASS_FRUIT, CLASS_FLOWER):
        for _ in range(counts[cls]):
            builder.place(cls)
    scene = SceneSpec(primitives=builder.primitives(), bounds=bounds)
    _LOGGER.debug(
        "Built plant seed=%s with %s primitives in %s attempts",
        seed,
        len(scene.primitives),
        builder.attempts,
    )
    return scene


def build_touching_leaves(seed: int, bounds: Bounds = DEFAULT_BOUNDS) -> SceneSpec:
    """Build a stem carrying two leaves of the same class that touch."""
    bounds = as_bounds(*bounds)
    rng = make_rng(seed)
    lo, hi = bounds
    s = float(np.min(hi - lo))
    base = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, lo[2] + 0.05 * (hi[2] - lo[2])])
    stem_length = 0.6 * (hi[2] - lo[2])
    stem = OrganPrimitive(
        kind=PrimitiveKind.CAPSULE,
        semantic_class=CLASS_STEM,
        instance_id=1,
        center=base + np.array([0.0, 0.0, stem_length / 2]),
        rotation=np.eye(3),
        sizes=(0.02 * s, stem_length / 2),
        base_color=CLASS_COLORS[CLASS_STEM],
    )
    anchor = base + np.array([0.0, 0.0, 0.8 * stem_length])
    first = rng.uniform(0.0, 2.0 * math.pi)
    leaves = []
    for index, azimuth in enumerate((first, first + math.radians(35.0)), start=2):
        a = rng.uniform(0.14, 0.16) * s
        axis = np.array([math.cos(azimuth), math.sin(azimuth), 0.0])
        leaves.append(
            OrganPrimitive(
                kind=PrimitiveKind.ELLIPSOID,
                semantic_class=CLASS_LEAF,
                instance_id=index,
                center=anchor + 0.9 * a * axis,
                rotation=_frame_from_axis(axis, azimuth),
                sizes=(a, 0.065 * s, 0.012 * s),
                base_color=CLASS_COLORS[CLASS_LEAF],
            )
        )
    return SceneSpec(primitives=(stem, *leaves), bounds=bounds)


def scene_to_dict(scene: SceneSpec) -> dict[str, Any]:
    """Serialize a scene to the scene-file record."""
    lo, hi = scene.bounds
    return {
        "bounds": {"min": lo.tolist(), "max": hi.tolist()},
        "light_direction": scene.light_direction.tolist(),
        "primitives": [
            {
                "kind": str(p.kind),
                "class": p.semantic_class,
                "id": p.instance_id,
                "center": p.center.tolist(),
                "rotation": p.rotation.ravel().tolist(),
                "sizes": list(p.sizes),
                "color": list(p.base_color),
            }
            for p in scene.primitives
        ],
    }


def scene_from_dict(record: dict[str, Any]) -> SceneSpec:
    """Parse a scene-file record."""
    try:
        primitives = tuple(
            OrganPrimitive(
                kind=PrimitiveKind(item["kind"]),
                semantic_class=int(item["class"]),
                instance_id=int(item["id"]),
                center=np.asarray(item["center"], dtype=np.float64),
                rotation=np.asarray(item["rotation"], dtype=np.float64).reshape(3, 3),
                sizes=tuple(item["sizes"]),
                base_color=tuple(item["color"]),
            )
            for item in record["primitives"]
        )
        bounds = (record["bounds"]["min"], record["bounds"]["max"])
        light = np.asarray(record["light_direction"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as err:
        msg = f"Malformed scene record: {err}"
        raise SceneError(msg) from err
    return SceneSpec(primitives=primitives, bounds=bounds, light_direction=light)
