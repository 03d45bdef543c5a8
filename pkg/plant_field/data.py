"""Custom types for plant_field."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, TypeAlias

import numpy as np

from .exceptions import InvalidInputError

if TYPE_CHECKING:
    from numpy.typing import NDArray


FloatArray: TypeAlias = "NDArray[np.float64]"
IntArray: TypeAlias = "NDArray[np.int64]"
LabelImage: TypeAlias = "NDArray[np.int64]"
ByteImage: TypeAlias = "NDArray[np.uint8]"
Bounds: TypeAlias = "tuple[FloatArray, FloatArray]"


def make_rng(seed: int) -> np.random.Generator:
    """Return the counter-based generator every random draw goes through."""
    return np.random.Generator(np.random.Philox(int(seed)))


def as_bounds(lower: object, upper: object) -> Bounds:
    """Normalize an axis-aligned box to a pair of float arrays."""
    lo = np.asarray(lower, dtype=np.float64).reshape(3)
    hi = np.asarray(upper, dtype=np.float64).reshape(3)
    if np.any(hi <= lo):
        msg = f"Degenerate bounds: {lo.tolist()} .. {hi.tolist()}"
        raise InvalidInputError(msg)
    return lo, hi


def bounds_diagonal(bounds: Bounds) -> float:
    """Return the length of the box diagonal."""
    lo, hi = bounds
    return float(np.linalg.norm(hi - lo))


@dataclass
class LabeledPointCloud:
    """Points carrying (X, Y, Z, R, G, B, S, I)."""

    positions: FloatArray
    colors: ByteImage
    semantic: NDArray[np.uint8]
    instance: IntArray

    def __post_init__(self) -> None:
        """Coerce dtypes and check attribute lengths."""
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        self.semantic = np.asarray(self.semantic, dtype=np.uint8).reshape(-1)
        self.instance = np.asarray(self.instance, dtype=np.int64).reshape(-1)
        count = len(self.positions)
        if not (len(self.colors) == len(self.semantic) == len(self.instance) == count):
            msg = "Point cloud attribute lengths differ"
            raise InvalidInputError(msg)

    def __len__(self) -> int:
        """Return the number of points."""
        return len(self.positions)

    def subset(self, index: np.ndarray) -> LabeledPointCloud:
        """Return the points selected by an index or mask."""
        return LabeledPointCloud(
            positions=self.positions[index],
            colors=self.colors[index],
            semantic=self.semantic[index],
            instance=self.instance[index],
        )

    @classmethod
    def empty(cls) -> LabeledPointCloud:
        """Return a cloud with no points."""
        return cls(
            positions=np.zeros((0, 3)),
            colors=np.zeros((0, 3), dtype=np.uint8),
            semantic=np.zeros(0, dtype=np.uint8),
            instance=np.zeros(0, dtype=np.int64),
        )
