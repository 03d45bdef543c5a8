"""Pinhole camera model: projection, ray generation and visibility.

Conventions: right-handed world frame, the camera looks down +z of its own
frame, image origin is the top-left corner and v grows downward. A pixel
(col, row) is sampled through its center (col + 0.5, row + 0.5). Depth maps
hold the distance along the unit pixel ray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import TYPE_CHECKING, Any

import numpy as np

from .const import T_FAR, T_NEAR
from .exceptions import InvalidCameraError

if TYPE_CHECKING:
    from .data import Bounds, FloatArray


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        """Validate the intrinsics."""
        if self.fx <= 0 or self.fy <= 0:
            msg = f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}"
            raise InvalidCameraError(msg)
        if self.width <= 0 or self.height <= 0:
            msg = f"Image size must be positive, got {self.width}x{self.height}"
            raise InvalidCameraError(msg)
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            msg = f"Principal point ({self.cx}, {self.cy}) outside the image"
            raise InvalidCameraError(msg)

    @classmethod
    def from_fov(cls, width: int, height: int, fov_degrees: float) -> Intrinsics:
        """Build centered intrinsics from a horizontal field of view."""
        focal = (width / 2.0) / math.tan(math.radians(fov_degrees) / 2.0)
        return cls(
            fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height
        )

    @property
    def matrix(self) -> FloatArray:
        """Return the 3x3 calibration matrix."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform."""

    rotation: FloatArray
    translation: FloatArray

    def __post_init__(self) -> None:
        """Validate and freeze the transform."""
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) >= 1e-9:
            msg = "Rotation is not orthonormal"
            raise InvalidCameraError(msg)
        if np.linalg.det(rotation) <= 0:
            msg = "Rotation has negative determinant"
            raise InvalidCameraError(msg)
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> Pose:
        """Return the identity pose."""
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    @classmethod
    def look_at(
        cls,
        eye: FloatArray,
        target: FloatArray,
        up: FloatArray | None = None,
    ) -> Pose:
        """Build a pose whose optical axis runs from eye to target."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            # Looking along the up axis.
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        return cls(rotation=rotation, translation=-rotation @ eye)

    @property
    def center(self) -> FloatArray:
        """Return the camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> FloatArray:
        """Return the world-frame viewing direction of the principal ray."""
        return self.rotation[2].copy()

    def to_camera(self, points: FloatArray) -> FloatArray:
        """Transform world points of shape (..., 3) into the camera frame."""
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Ray:
    """Parametric ray r(t) = origin + t * direction on [t_near, t_far]."""

    origin: FloatArray
    direction: FloatArray
    t_near: float = T_NEAR
    t_far: float = T_FAR

    def __post_init__(self) -> None:
        """Validate the ray."""
        if abs(float(np.linalg.norm(self.direction)) - 1.0) > 1e-9:
            msg = "Ray direction must be a unit vector"
            raise InvalidCameraError(msg)
        if not 0 < self.t_near < self.t_far:
            msg = f"Invalid ray bounds [{self.t_near}, {self.t_far}]"
            raise InvalidCameraError(msg)

    def at(self, t: float) -> FloatArray:
        """Return the point at parameter t."""
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Projection:
    """Pixel coordinates and camera-frame depth of a projected point."""

    u: float
    v: float
    depth: float


class Visibility(IntEnum):
    """Visibility of a world point in a view."""

    VISIBLE = 0
    OCCLUDED = 1
    OUTSIDE = 2


@dataclass
class CameraView:
    """Camera plus the per-view image stack."""

    intrinsics: Intrinsics
    pose: Pose
    depth: FloatArray | None = None
    rgb: Any = None
    semantic: Any = None
    instance: Any = None
    extras: dict[str, Any] = field(default_factory=dict)


def project_world_to_pixel(
    point: FloatArray, intr: Intrinsics, pose: Pose
) -> Projection | None:
    """Project a world point; return None when it is behind the camera."""
    cam = pose.to_camera(np.asarray(point, dtype=np.float64).reshape(3))
    if cam[2] <= 0:
        return None
    return Projection(
        u=float(intr.fx * cam[0] / cam[2] + intr.cx),
        v=float(intr.fy * cam[1] / cam[2] + intr.cy),
        depth=float(cam[2]),
    )


def project_points(
    points: FloatArray, intr: Intrinsics, pose: Pose
) -> tuple[FloatArray, FloatArray]:
    """Project (N, 3) world points; return (N, 2) pixel coords and (N,) depth.

    Points at or behind the camera get NaN pixel coordinates.
    """
    cam = pose.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depth = cam[:, 2]
    in_front = depth > 0
    safe = np.where(in_front, depth, 1.0)
    uv = np.stack(
        [intr.fx * cam[:, 0] / safe + intr.cx, intr.fy * cam[:, 1] / safe + intr.cy],
        axis=1,
    )
    uv[~in_front] = np.nan
    return uv, depth


def pixel_directions(
    pixels: FloatArray, intr: Intrinsics, pose: Pose
) -> FloatArray:
    """Return unit world-frame directions through (N, 2) continuous pixels."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    cam = np.stack(
        [
            (pixels[:, 0] - intr.cx) / intr.fx,
            (pixels[:, 1] - intr.cy) / intr.fy,
            np.ones(len(pixels)),
        ],
        axis=1,
    )
    world = cam @ pose.rotation
    return world / np.linalg.norm(world, axis=1, keepdims=True)


def pixel_to_ray(
    u: float,
    v: float,
    intr: Intrinsics,
    pose: Pose,
    t_near: float = T_NEAR,
    t_far: float = T_FAR,
) -> Ray:
    """Back-project a continuous pixel coordinate into a world ray."""
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        msg = f"Pixel ({u}, {v}) outside {intr.width}x{intr.height} image"
        raise InvalidCameraError(msg)
    direction = pixel_directions(np.array([[u, v]]), intr, pose)[0]
    return Ray(origin=pose.center, direction=direction, t_near=t_near, t_far=t_far)


def pixel_centers(intr: Intrinsics) -> FloatArray:
    """Return the (H * W, 2) centers of every pixel in row-major order."""
    cols, rows = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    return np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=1)


def ray_box_bounds(
    origins: FloatArray,
    directions: FloatArray,
    bounds: Bounds,
    t_near: float = T_NEAR,
    t_far: float = T_FAR,
) -> tuple[FloatArray, FloatArray, np.ndarray]:
    """Clip rays to an axis-aligned box with the slab method.

    Returns per-ray (near, far, hit) where hit marks rays with a non-empty
    interval inside [t_near, t_far].
    """
    lo, hi = bounds
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    t_min = np.nanmax(np.minimum(t0, t1), axis=1)
    t_max = np.nanmin(np.maximum(t0, t1), axis=1)
    near = np.maximum(t_min, t_near)
    far = np.minimum(t_max, t_far)
    return near, far, far > near


def visibility(
    points: FloatArray, view: CameraView, depth_tolerance: float
) -> np.ndarray:
    """Classify (N, 3) world points against a view's depth map.

    Returns an int array of `Visibility` codes.
    """
    if view.depth is None:
        msg = "Visibility test requires a depth map"
        raise InvalidCameraError(msg)
    intr = view.intrinsics
    uv, depth = project_points(points, intr, view.pose)
    codes = np.full(len(uv), Visibility.OUTSIDE, dtype=np.int64)
    inside = (
        (depth > 0)
        & (uv[:, 0] >= 0)
        & (uv[:, 0] < intr.width)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] < intr.height)
    )
    idx = np.flatnonzero(inside)
    cols = np.floor(uv[idx, 0]).astype(np.int64)
    rows = np.floor(uv[idx, 1]).astype(np.int64)
    distance = np.linalg.norm(points[idx] - view.pose.center, axis=1)
    stored = view.depth[rows, cols]
    occluded = distance > stored + depth_tolerance
    codes[idx] = np.where(occluded, Visibility.OCCLUDED, Visibility.VISIBLE)
    return codes


def is_visible(point: FloatArray, view: CameraView, depth_tolerance: float) -> Visibility:
    """Classify a single world point against a view."""
    code = visibility(np.asarray(point, dtype=np.float64).reshape(1, 3), view, depth_tolerance)
    return Visibility(int(code[0]))


def ring_cameras(
    n_views: int,
    radius: float,
    elevations_deg: list[float],
    target: FloatArray | None = None,
) -> list[Pose]:
    """Place cameras on a hemisphere ring, ordered by azimuth.

    Elevations cycle over consecutive views so neighbours in index order stay
    neighbours on the ring.
    """
    target = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
    poses = []
    for index in range(n_views):
        azimuth = 2.0 * math.pi * index / n_views
        elevation = math.radians(elevations_deg[index % len(elevations_deg)])
        eye = target + radius * np.array(
            [
                math.cos(elevation) * math.cos(azimuth),
                math.cos(elevation) * math.sin(azimuth),
                math.sin(elevation),
            ]
        )
        poses.append(Pose.look_at(eye, target))
    return poses


def camera_to_dict(intr: Intrinsics, pose: Pose) -> dict[str, Any]:
    """Serialize one camera to the camera-file record."""
    return {
        "fx": intr.fx,
        "fy": intr.fy,
        "cx": intr.cx,
        "cy": intr.cy,
        "width": intr.width,
        "height": intr.height,
        "rotation": pose.rotation.ravel().tolist(),
        "translation": pose.translation.tolist(),
    }


def camera_from_dict(record: dict[str, Any]) -> tuple[Intrinsics, Pose]:
    """Parse one camera-file record."""
    try:
        intr = Intrinsics(
            fx=float(record["fx"]),
            fy=float(record["fy"]),
            cx=float(record["cx"]),
            cy=float(record["cy"]),
            width=int(record["width"]),
            height=int(record["height"]),
        )
        pose = Pose(
            rotation=np.asarray(record["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(record["translation"], dtype=np.float64).reshape(3),
        )
    except (KeyError, TypeError, ValueError) as err:
        if isinstance(err, InvalidCameraError):
            raise
        msg = f"Malformed camera record: {err}"
        raise InvalidCameraError(msg) from err
    return intr, pose
