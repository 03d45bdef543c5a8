"""Inject per-view 2D segmentation errors into rendered label images.

Every view's instance ids are independently permuted. On top of that the six
error patterns are injected at configurable rates:

  a  background promoted to an instance
  b  one mask of the matched main view split in two
  c  two adjacent masks of the main view merged
  d  one mask of an aux view split in two
  e  two adjacent masks of an aux view merged
  f  one instance lost to background

Main and aux are roles assigned during matching, so b/d and c/e are produced
by the same mechanism; their tags only record which table row they emulate.
"""

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
from typing import TYPE_CHECKING, Any

import numpy as np

from .const import _LOGGER, SEMANTIC_CLASSES
from .data import make_rng
from .exceptions import InvalidInputError

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    from .data import IntArray, LabelImage
    from .scene import RenderedView

MIN_PART_PIXELS = 4
SPLIT_TRIES = 8
BLOB_RADIUS = (3.0, 6.0)


class ErrorPattern(StrEnum):
    """Error pattern tags."""

    BACKGROUND = "a"
    OVER_MAIN = "b"
    UNDER_MAIN = "c"
    OVER_AUX = "d"
    UNDER_AUX = "e"
    LOSS = "f"


@dataclass(frozen=True)
class CorruptionConfig:
    """Per-pattern injection rates and exact counts.

    `rates[p]` is the chance that one event of pattern p is attempted in each
    view. `counts[p]` additionally forces p into that many distinct views.
    """

    rates: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate the rates."""
        for key, rate in self.rates.items():
            ErrorPattern(key)
            if not 0.0 <= rate <= 1.0:
                msg = f"Rate for pattern {key} must lie in [0, 1], got {rate}"
                raise InvalidInputError(msg)
        for key, count in self.counts.items():
            ErrorPattern(key)
            if count < 0:
                msg = f"Count for pattern {key} must be non-negative, got {count}"
                raise InvalidInputError(msg)


@dataclass
class CorruptionEvent:
    """One attempted injection.

    `pixels` are flat indices whose true global id is `truth_id` after the
    event; they are only recorded when renaming alone cannot recover the truth.
    """

    pattern: str
    affected: tuple[int, ...] = ()
    skipped: bool = False
    reason: str = ""
    pixels: IntArray | None = None
    truth_id: int = 0

    def to_dict(self) -> dict[str, Any]:
        """Serialize the event."""
        return {
            "pattern": self.pattern,
            "affected": list(self.affected),
            "skipped": self.skipped,
            "reason": self.reason,
            "pixels": None if self.pixels is None else self.pixels.tolist(),
            "truth_id": self.truth_id,
        }

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> CorruptionEvent:
        """Parse an event."""
        pixels = record.get("pixels")
        return cls(
            pattern=record["pattern"],
            affected=tuple(record.get("affected", ())),
            skipped=bool(record.get("skipped", False)),
            reason=record.get("reason", ""),
            pixels=None if pixels is None else np.asarray(pixels, dtype=np.int64),
            truth_id=int(record.get("truth_id", 0)),
        )


@dataclass
class ViewCorruption:
    """Log of one view: local id to true global id (0 = background) and events."""

    view: int
    local_to_global: dict[int, int] = field(default_factory=dict)
    events: list[CorruptionEvent] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        """Serialize the view log."""
        return {
            "view": self.view,
            "local_to_global": {str(k): v for k, v in sorted(self.local_to_global.items())},
            "events": [event.to_dict() for event in self.events],
        }

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> ViewCorruption:
        """Parse a view log."""
        return cls(
            view=int(record["view"]),
            local_to_global={int(k): int(v) for k, v in record["local_to_global"].items()},
            events=[CorruptionEvent.from_dict(e) for e in record["events"]],
        )


@dataclass
class CorruptionLog:
    """Everything injected, per view."""

    views: list[ViewCorruption] = field(default_factory=list)

    def injected(self, pattern: str | None = None) -> list[tuple[int, CorruptionEvent]]:
        """Return (view, event) pairs that were applied."""
        return [
            (log.view, event)
            for log in self.views
            for event in log.events
            if not event.skipped and (pattern is None or event.pattern == pattern)
        ]

    def skipped(self) -> list[tuple[int, CorruptionEvent]]:
        """Return (view, event) pairs whose preconditions were absent."""
        return [(log.view, e) for log in self.views for e in log.events if e.skipped]

    def to_dict(self) -> dict[str, Any]:
        """Serialize the log."""
        return {"views": [log.to_dict() for log in self.views]}

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> CorruptionLog:
        """Parse a log."""
        return cls(views=[ViewCorruption.from_dict(v) for v in record["views"]])


class _ViewInjector:
    """Mutates one view in place while keeping its log current."""

    def __init__(self, view: RenderedView, log: ViewCorruption, rng: np.random.Generator) -> None:
        """Initialize the injector."""
        self.view = view
        self.log = log
        self.rng = rng
        self.touched: set[int] = set()

    def _free_ids(self, min_pixels: int = 1) -> list[int]:
        counts = np.bincount(self.view.instance.ravel())
        return [
            local
            for local in sorted(self.log.local_to_global)
            if local not in self.touched
            and local < len(counts)
            and counts[local] >= min_pixels
            and self.log.local_to_global[local] != 0
        ]

    def _next_id(self) -> int:
        return max([0, *self.log.local_to_global, int(self.view.instance.max())]) + 1

    def _skip(self, pattern: str, reason: str) -> CorruptionEvent:
        return CorruptionEvent(pattern=pattern, skipped=True, reason=reason)

    def split(self, pattern: str) -> CorruptionEvent:
        """Split one mask along a random line through its centroid."""
        candidates = self._free_ids(2 * MIN_PART_PIXELS)
        if not candidates:
            return self._skip(pattern, "no mask large enough to split")
        local = int(self.rng.choice(candidates))
        rows, cols = np.nonzero(self.view.instance == local)
        for _ in range(SPLIT_TRIES):
            angle = self.rng.uniform(0.0, math.pi)
            side = (cols - cols.mean()) * math.cos(angle) + (rows - rows.mean()) * math.sin(angle) > 0
            if MIN_PART_PIXELS <= side.sum() <= len(side) - MIN_PART_PIXELS:
                break
        else:
            return self._skip(pattern, f"no balanced split line for id {local}")
        new = self._next_id()
        self.view.instance[rows[side], cols[side]] = new
        self.log.local_to_global[new] = self.log.local_to_global[local]
        self.touched.update((local, new))
        return CorruptionEvent(pattern=pattern, affected=(local, new))

    def merge(self, pattern: str) -> CorruptionEvent:
        """Merge two 4-adjacent masks into one id."""
        free = set(self._free_ids())
        instance = self.view.instance
        pairs: set[tuple[int, int]] = set()
        for a, b in (
            (instance[:, :-1], instance[:, 1:]),
            (instance[:-1, :], instance[1:, :]),
        ):
            differ = (a != b) & (a > 0) & (b > 0)
            for x, y in zip(a[differ].tolist(), b[differ].tolist(), strict=True):
                if x in free and y in free:
                    pairs.add((min(x, y), max(x, y)))
        if not pairs:
            return self._skip(pattern, "no adjacent masks to merge")
        ordered = sorted(pairs)
        keep, absorb = ordered[int(self.rng.integers(len(ordered)))]
        if self.rng.random() < 0.5:
            keep, absorb = absorb, keep
        mask = instance == absorb
        keep_class = int(self.view.semantic[instance == keep][0])
        pixels = np.flatnonzero(mask)
        instance[mask] = keep
        self.view.semantic[mask] = keep_class
        truth = self.log.local_to_global.pop(absorb)
        self.touched.update((keep, absorb))
        return CorruptionEvent(
            pattern=pattern, affected=(keep, absorb), pixels=pixels, truth_id=truth
        )

    def promote_background(self, pattern: str) -> CorruptionEvent:
        """Turn a disk of background pixels into a new instance."""
        background = np.flatnonzero(self.view.instance.ravel() == 0)
        if len(background) < MIN_PART_PIXELS:
            return self._skip(pattern, "no background to promote")
        height, width = self.view.instance.shape
        rows, cols = np.mgrid[0:height, 0:width]
        for _ in range(SPLIT_TRIES):
            seed_pixel = int(self.rng.choice(background))
            radius = self.rng.uniform(*BLOB_RADIUS)
            disk = (rows - seed_pixel // width) ** 2 + (cols - seed_pixel % width) ** 2 <= radius**2
            blob = disk & (self.view.instance == 0)
            if blob.sum() >= MIN_PART_PIXELS:
                break
        else:
            return self._skip(pattern, "background too fragmented for a blob")
        new = self._next_id()
        self.view.instance[blob] = new
        self.view.semantic[blob] = int(self.rng.choice(list(SEMANTIC_CLASSES)))
        self.log.local_to_global[new] = 0
        self.touched.add(new)
        return CorruptionEvent(
            pattern=pattern, affected=(new,), pixels=np.flatnonzero(blob), truth_id=0
        )

    def lose(self, pattern: str) -> CorruptionEvent:
        """Relabel one instance to background."""
        candidates = self._free_ids()
        if not candidates:
            return self._skip(pattern, "no instance to lose")
        local = int(self.rng.choice(candidates))
        mask = self.view.instance == local
        self.view.instance[mask] = 0
        self.view.semantic[mask] = 0
        truth = self.log.local_to_global.pop(local)
        self.touched.add(local)
        return CorruptionEvent(
            pattern=pattern, affected=(local,), pixels=np.flatnonzero(mask), truth_id=truth
        )

    def inject(self, pattern: str) -> CorruptionEvent:
        """Dispatch one pattern."""
        handlers: dict[str, Callable[[str], CorruptionEvent]] = {
            ErrorPattern.BACKGROUND: self.promote_background,
            ErrorPattern.OVER_MAIN: self.split,
            ErrorPattern.UNDER_MAIN: self.merge,
            ErrorPattern.OVER_AUX: self.split,
            ErrorPattern.UNDER_AUX: self.merge,
            ErrorPattern.LOSS: self.lose,
        }
        return handlers[pattern](pattern)


def _permute(view: RenderedView, rng: np.random.Generator) -> dict[int, int]:
    """Rename the view's ids to a random permutation of 1..K."""
    truth_ids = view.instance_ids()
    local_ids = rng.permutation(len(truth_ids)) + 1
    lookup = np.zeros(int(view.instance.max()) + 1, dtype=np.int64)
    for truth, local in zip(truth_ids, local_ids, strict=True):
        lookup[truth] = local
    view.instance = lookup[view.instance]
    return {int(local): truth for truth, local in zip(truth_ids, local_ids, strict=True)}


def corrupt_labels(
    views: Sequence[RenderedView], config: CorruptionConfig, seed: int
) -> tuple[list[RenderedView], CorruptionLog]:
    """Return permuted, error-injected copies of the views and the injection log."""
    rng = make_rng(seed)
    forced: list[list[str]] = [[] for _ in views]
    for pattern in ErrorPattern:
        count = min(config.counts.get(pattern, 0), len(views))
        if count:
            for index in rng.choice(len(views), size=count, replace=False):
                forced[int(index)].append(pattern)
    corrupted = []
    log = CorruptionLog()
    for index, source in enumerate(views):
        view = source.copy()
        view_log = ViewCorruption(view=index, local_to_global=_permute(view, rng))
        injector = _ViewInjector(view, view_log, rng)
        for pattern in ErrorPattern:
            attempts = forced[index].count(pattern)
            if rng.random() < config.rates.get(pattern, 0.0):
                attempts += 1
            for _ in range(attempts):
                event = injector.inject(pattern)
                if event.skipped:
                    _LOGGER.warning(
                        "Skipped pattern %s in view %s: %s", pattern, index, event.reason
                    )
                view_log.events.append(event)
        corrupted.append(view)
        log.views.append(view_log)
    _LOGGER.debug(
        "Corrupted %s views: %s events injected, %s skipped",
        len(views),
        len(log.injected()),
        len(log.skipped()),
    )
    return corrupted, log


def reconstruct_truth(view: RenderedView, view_log: ViewCorruption) -> LabelImage:
    """Rebuild the true global id map of a corrupted view from its log."""
    lookup = np.zeros(max([0, *view_log.local_to_global, int(view.instance.max())]) + 1, dtype=np.int64)
    for local, truth in view_log.local_to_global.items():
        lookup[local] = truth
    truth_map = lookup[view.instance]
    flat = truth_map.reshape(-1)
    for event in view_log.events:
        if not event.skipped and event.pixels is not None:
            flat[event.pixels] = event.truth_id
    return truth_map
