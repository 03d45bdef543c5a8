"""Seven-channel label codec: (R, G, B, S1, I1, I2, I3) pixel vectors.

Semantic classes map to equally spaced levels of one byte channel. Global
instance ids map to codewords on a uniform k x k x k lattice spanning
[32, 255]^3, which keeps foreground codes far from the all-zero background
code and from each other. The three instance bytes form one 24-bit code.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy.spatial.distance import pdist

from .const import (
    _LOGGER,
    CLASS_BACKGROUND,
    CODEWORD_HIGH,
    CODEWORD_LOW,
    MAX_CODEBOOK_CLASSES,
    MAX_CODEBOOK_INSTANCES,
)
from .exceptions import CodebookError

if TYPE_CHECKING:
    from collections.abc import Iterable

    from .data import ByteImage, FloatArray, IntArray, LabelImage

DECODE_BUDGET = 1 << 22
TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SemanticCodebook:
    """Class to S1 byte level; class 0 is background at level 0."""

    num_classes: int
    levels: dict[int, int]

    def table(self) -> tuple[IntArray, FloatArray]:
        """Return classes (background first, ascending) and normalized levels."""
        classes = np.array([CLASS_BACKGROUND, *sorted(self.levels)], dtype=np.int64)
        levels = np.array([0, *(self.levels[c] for c in sorted(self.levels))], dtype=np.float64)
        return classes, levels / 255.0

    @property
    def min_gap(self) -> int:
        """Return the smallest gap between consecutive levels."""
        values = sorted([0, *self.levels.values()])
        return min(b - a for a, b in zip(values, values[1:], strict=False))


@dataclass(frozen=True)
class InstanceCodebook:
    """Global instance id to (I1, I2, I3) bytes; id 0 is background (0, 0, 0)."""

    codewords: dict[int, tuple[int, int, int]]
    lattice_side: int
    min_distance: float

    def table(self) -> tuple[IntArray, FloatArray]:
        """Return ids (background first, ascending) and normalized codewords."""
        ids = np.array([0, *sorted(self.codewords)], dtype=np.int64)
        words = np.array(
            [(0, 0, 0), *(self.codewords[i] for i in sorted(self.codewords))], dtype=np.float64
        )
        return ids, words / 255.0


@dataclass(frozen=True)
class Codebooks:
    """Both codebooks of a run."""

    semantic: SemanticCodebook
    instance: InstanceCodebook

    def to_dict(self) -> dict[str, Any]:
        """Serialize to the codebook-file record."""
        return {
            "semantic": {
                "num_classes": self.semantic.num_classes,
                "levels": {str(k): v for k, v in sorted(self.semantic.levels.items())},
            },
            "instance": {
                "lattice_side": self.instance.lattice_side,
                "min_distance": (
                    None if math.isinf(self.instance.min_distance) else self.instance.min_distance
                ),
                "codewords": {
                    str(k): list(v) for k, v in sorted(self.instance.codewords.items())
                },
            },
        }

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> Codebooks:
        """Parse a codebook-file record."""
        try:
            semantic = SemanticCodebook(
                num_classes=int(record["semantic"]["num_classes"]),
                levels={int(k): int(v) for k, v in record["semantic"]["levels"].items()},
            )
            inst = record["instance"]
            min_distance = inst["min_distance"]
            instance = InstanceCodebook(
                codewords={int(k): tuple(int(c) for c in v) for k, v in inst["codewords"].items()},
                lattice_side=int(inst["lattice_side"]),
                min_distance=math.inf if min_distance is None else float(min_distance),
            )
        except (KeyError, TypeError, ValueError) as err:
            msg = f"Malformed codebook record: {err}"
            raise CodebookError(msg) from err
        return cls(semantic=semantic, instance=instance)

    def digest(self) -> str:
        """Return the SHA-256 of the canonical JSON record."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass(frozen=True)
class PixelVector:
    """Seven byte channels (R, G, B, S1, I1, I2, I3)."""

    channels: tuple[int, int, int, int, int, int, int]

    def normalized(self) -> FloatArray:
        """Return the channels scaled to [0, 1]."""
        return np.asarray(self.channels, dtype=np.float64) / 255.0

    @property
    def is_background(self) -> bool:
        """Return whether the label channels are all zero."""
        return self.channels[3:] == (0, 0, 0, 0)


def lattice_side(count: int) -> int:
    """Return the smallest k with k^3 >= count."""
    side = max(1, round(count ** (1.0 / 3.0)))
    while side**3 < count:
        side += 1
    while side > 1 and (side - 1) ** 3 >= count:
        side -= 1
    return side


def allocate_codebooks(num_classes: int, instance_ids: Iterable[int]) -> Codebooks:
    """Allocate the semantic levels and instance codewords."""
    ids = sorted({int(i) for i in instance_ids})
    if not 1 <= num_classes <= MAX_CODEBOOK_CLASSES:
        msg = f"Class count must lie in [1, {MAX_CODEBOOK_CLASSES}], got {num_classes}"
        raise CodebookError(msg)
    if len(ids) > MAX_CODEBOOK_INSTANCES:
        msg = f"At most {MAX_CODEBOOK_INSTANCES} instances, got {len(ids)}"
        raise CodebookError(msg)
    if ids and ids[0] <= 0:
        msg = "Instance ids must be positive"
        raise CodebookError(msg)
    semantic = SemanticCodebook(
        num_classes=num_classes,
        levels={c: round(c * 255 / num_classes) for c in range(1, num_classes + 1)},
    )
    count = len(ids)
    side = lattice_side(count)
    if side == 1:
        values = np.array([CODEWORD_HIGH])
    else:
        span = CODEWORD_HIGH - CODEWORD_LOW
        values = np.array([CODEWORD_LOW + round(i * span / (side - 1)) for i in range(side)])
    cells = side**3
    codewords: dict[int, tuple[int, int, int]] = {}
    for order, instance_id in enumerate(ids):
        linear = cells - 1 if count == 1 else round(order * (cells - 1) / (count - 1))
        codewords[instance_id] = (
            int(values[linear // (side * side)]),
            int(values[(linear // side) % side]),
            int(values[linear % side]),
        )
    if count > 1:
        words = np.array([codewords[i] for i in ids], dtype=np.float64) / 255.0
        min_distance = float(pdist(words).min())
    else:
        min_distance = math.inf
    _LOGGER.debug(
        "Allocated %s codewords on a %s^3 lattice, min distance %s", count, side, min_distance
    )
    return Codebooks(
        semantic=semantic,
        instance=InstanceCodebook(codewords=codewords, lattice_side=side, min_distance=min_distance),
    )


def encode_pixel(
    rgb: tuple[int, int, int], semantic_class: int, global_id: int, codebooks: Codebooks
) -> PixelVector:
    """Encode one pixel's color and labels."""
    if semantic_class == CLASS_BACKGROUND or global_id == 0:
        if semantic_class != global_id:
            msg = f"Background requires class 0 and id 0, got {semantic_class}/{global_id}"
            raise CodebookError(msg)
        return PixelVector((*(int(c) for c in rgb), 0, 0, 0, 0))
    if semantic_class not in codebooks.semantic.levels:
        msg = f"Unknown semantic class {semantic_class}"
        raise CodebookError(msg)
    if global_id not in codebooks.instance.codewords:
        msg = f"Unknown instance id {global_id}"
        raise CodebookError(msg)
    return PixelVector(
        (
            *(int(c) for c in rgb),
            codebooks.semantic.levels[semantic_class],
            *codebooks.instance.codewords[global_id],
        )
    )


def _nearest(values: FloatArray, table: FloatArray) -> IntArray:
    """Return the row of `table` nearest each value row, ties to the lower row."""
    result = np.empty(len(values), dtype=np.int64)
    step = max(1, DECODE_BUDGET // (len(table) * table.shape[1]))
    for start in range(0, len(values), step):
        chunk = values[start : start + step]
        dist = np.sqrt(((chunk[:, None, :] - table[None, :, :]) ** 2).sum(axis=-1))
        best = dist.min(axis=1, keepdims=True)
        result[start : start + step] = np.argmax(dist <= best + TIE_TOLERANCE, axis=1)
    return result


def decode_labels(
    semantic_values: FloatArray, instance_values: FloatArray, codebooks: Codebooks
) -> tuple[IntArray, IntArray]:
    """Decode normalized S1 values (N,) and (I1, I2, I3) values (N, 3)."""
    classes, levels = codebooks.semantic.table()
    ids, words = codebooks.instance.table()
    semantic_values = np.asarray(semantic_values, dtype=np.float64).reshape(-1, 1)
    instance_values = np.asarray(instance_values, dtype=np.float64).reshape(-1, 3)
    return (
        classes[_nearest(semantic_values, levels[:, None])],
        ids[_nearest(instance_values, words)],
    )


def decode_pixel(vector: FloatArray, codebooks: Codebooks) -> tuple[int, int]:
    """Decode one normalized seven-channel vector into (class, global id)."""
    vector = np.asarray(vector, dtype=np.float64).reshape(7)
    classes, ids = decode_labels(vector[3:4], vector[4:7], codebooks)
    return int(classes[0]), int(ids[0])


def encode_targets(
    rgb: ByteImage, semantic: ByteImage, instance: LabelImage, codebooks: Codebooks
) -> FloatArray:
    """Encode label images into normalized (H, W, 7) training targets."""
    semantic = np.asarray(semantic, dtype=np.int64)
    instance = np.asarray(instance, dtype=np.int64)
    level_lookup = np.zeros(max([0, *codebooks.semantic.levels]) + 1)
    for cls, level in codebooks.semantic.levels.items():
        level_lookup[cls] = level
    unknown_classes = set(np.unique(semantic).tolist()) - {0, *codebooks.semantic.levels}
    unknown_ids = set(np.unique(instance).tolist()) - {0, *codebooks.instance.codewords}
    if unknown_classes or unknown_ids:
        msg = f"Labels missing from codebooks: classes {sorted(unknown_classes)}, ids {sorted(unknown_ids)}"
        raise CodebookError(msg)
    ids, words = codebooks.instance.table()
    word_index = np.searchsorted(ids, instance)
    targets = np.empty((*instance.shape, 7))
    targets[..., 0:3] = np.asarray(rgb, dtype=np.float64) / 255.0
    targets[..., 3] = level_lookup[semantic] / 255.0
    targets[..., 4:7] = words[word_index]
    return targets
