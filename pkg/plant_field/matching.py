"""Cross-view instance matching by bidirectional voting.

A main view's instance masks are sampled, lifted to 3D through a depth
source and projected into every auxiliary view. Forward votes count where
each main instance lands (aux instance, BG, OUT or OCC); inverse votes count,
per aux instance, which main instances landed inside it. Abnormal
segmentations are detected from both tables and handled before the local ids
are folded into global ids. Main views are chosen iteratively along the
camera ring until coverage is good enough.
"""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Protocol, TypeAlias

import numpy as np

from .camera import (
    CameraView,
    Visibility,
    pixel_directions,
    project_points,
    ray_box_bounds,
    visibility,
)
from .const import (
    _LOGGER,
    DEPTH_TOLERANCE_FRACTION,
    MAX_IM_ITERATIONS,
    MIN_INVERSE_SUPPORT,
    SAMPLE_MIN,
    SAMPLE_STEP_CAP,
    SAMPLE_TARGET,
    UNASSIGNED_THRESHOLD,
)
from .corruption import ErrorPattern
from .data import bounds_diagonal, make_rng
from .exceptions import InvalidInputError

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .camera import Intrinsics, Pose
    from .data import Bounds, FloatArray, IntArray, LabelImage
    from .scene import RenderedView

CameraPair: TypeAlias = "tuple[Intrinsics, Pose]"

VOTE_BG = 0
VOTE_OUT = -1
VOTE_OCC = -2

UNASSIGNED = -1
ELIMINATED = 0

MIN_INVERSE_POINTS = 2
# A split piece must hold this share of the main instance's non-OCC points.
MIN_PIECE_SHARE = 0.15


@dataclass(frozen=True)
class MatchingConfig:
    """Tunables of the matching loop."""

    sample_target: int = SAMPLE_TARGET
    step_cap: int = SAMPLE_STEP_CAP
    sample_min: int = SAMPLE_MIN
    depth_tolerance_fraction: float = DEPTH_TOLERANCE_FRACTION
    max_iterations: int = MAX_IM_ITERATIONS
    unassigned_threshold: int = UNASSIGNED_THRESHOLD
    min_inverse_support: float = MIN_INVERSE_SUPPORT
    orphan_sweep: bool = True
    workers: int = 1


class DepthSource(Protocol):
    """Per-pixel depth for lifting and depth maps for visibility."""

    def pixel_depth(self, view: int, rows: IntArray, cols: IntArray) -> FloatArray:
        """Return ray distances at pixel centers; NaN where depth is missing."""

    def depth_map(self, view: int) -> FloatArray:
        """Return the view's full depth map (inf on background)."""


class RendererDepthSource:
    """Depth answered from rendered depth maps.

    Background pixels get the exit distance of their ray through the scene
    box, a virtual backdrop; rays that miss the box have no depth.
    """

    def __init__(
        self, depths: Sequence[FloatArray], cameras: Sequence[CameraPair], bounds: Bounds
    ) -> None:
        """Initialize the source."""
        self._depths = list(depths)
        self._cameras = list(cameras)
        self._bounds = bounds

    def pixel_depth(self, view: int, rows: IntArray, cols: IntArray) -> FloatArray:
        """Return ray distances at pixel centers."""
        depth = self._depths[view][rows, cols].astype(np.float64)
        backdrop = ~np.isfinite(depth)
        if backdrop.any():
            intr, pose = self._cameras[view]
            pixels = np.stack([cols[backdrop] + 0.5, rows[backdrop] + 0.5], axis=1)
            dirs = pixel_directions(pixels, intr, pose)
            origins = np.broadcast_to(pose.center, dirs.shape)
            _, far, hit = ray_box_bounds(origins, dirs, self._bounds)
            depth[backdrop] = np.where(hit, far, np.nan)
        return depth

    def depth_map(self, view: int) -> FloatArray:
        """Return the rendered depth map."""
        return self._depths[view]


@dataclass
class ForwardVoteTable:
    """Main instance x aux view histograms over aux ids, BG, OUT and OCC."""

    main_view: int
    main_ids: list[int]
    aux_views: list[int]
    cells: dict[tuple[int, int], Counter[int]] = field(default_factory=dict)
    skipped: dict[int, int] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        """Return (main instances, aux views)."""
        return len(self.main_ids), len(self.aux_views)

    def cell(self, main_id: int, aux_view: int) -> Counter[int]:
        """Return one histogram."""
        return self.cells.get((main_id, aux_view), Counter())

    def informative(self, main_id: int, aux_view: int) -> int:
        """Return the non-OCC vote count of a cell."""
        cell = self.cell(main_id, aux_view)
        return sum(cell.values()) - cell.get(VOTE_OCC, 0)

    def argmax(self, main_id: int, aux_view: int) -> int | None:
        """Return the winning non-OCC key, None when the cell has no such vote.

        Ties go to instance ids (smallest first), then BG, then OUT.
        """
        cell = self.cell(main_id, aux_view)
        keys = [k for k, c in cell.items() if k != VOTE_OCC and c > 0]
        if not keys:
            return None
        return min(keys, key=lambda k: (-cell[k], k <= 0, abs(k)))


@dataclass
class InverseVoteTable:
    """Per aux view and aux instance, histograms over main instance ids."""

    main_view: int
    cells: dict[int, dict[int, Counter[int]]] = field(default_factory=dict)

    def cell(self, aux_view: int, aux_id: int) -> Counter[int]:
        """Return one histogram."""
        return self.cells.get(aux_view, {}).get(aux_id, Counter())

    def aux_ids(self, aux_view: int) -> list[int]:
        """Return the aux instances that received votes."""
        return sorted(self.cells.get(aux_view, {}))

    def argmax(
        self, aux_view: int, aux_id: int, forward: ForwardVoteTable, min_support: float
    ) -> int | None:
        """Return the supported main instance with most votes, ties to the smaller id.

        Support needs at least two points and `min_support` of the main
        instance's non-OCC points in that view.
        """
        cell = self.cell(aux_view, aux_id)
        supported = [
            main
            for main, count in cell.items()
            if count >= MIN_INVERSE_POINTS
            and count >= min_support * forward.informative(main, aux_view)
        ]
        if not supported:
            return None
        return min(supported, key=lambda m: (-cell[m], m))


@dataclass(frozen=True)
class Finding:
    """One detected abnormal segmentation."""

    pattern: str
    main_ids: tuple[int, ...] = ()
    aux_view: int | None = None
    aux_ids: tuple[int, ...] = ()
    fraction: float = 1.0

    def to_dict(self) -> dict[str, Any]:
        """Serialize the finding."""
        return {
            "pattern": self.pattern,
            "main_ids": list(self.main_ids),
            "aux_view": self.aux_view,
            "aux_ids": list(self.aux_ids),
            "fraction": self.fraction,
        }


@dataclass
class ErrorReport:
    """Findings for one main view."""

    findings: list[Finding] = field(default_factory=list)

    def of(self, pattern: str) -> list[Finding]:
        """Return the findings of one pattern."""
        return [f for f in self.findings if f.pattern == pattern]

    def flagged_main(self, pattern: str) -> set[int]:
        """Return main ids involved in a pattern."""
        return {m for f in self.of(pattern) for m in f.main_ids}

    def counts(self) -> dict[str, int]:
        """Return finding counts per pattern."""
        return {str(p): len(self.of(p)) for p in ErrorPattern}

    def __bool__(self) -> bool:
        """Return whether anything was found."""
        return bool(self.findings)


@dataclass
class GlobalLabelState:
    """Per-view local to global id maps plus loop bookkeeping."""

    mapping: list[dict[int, int]]
    error_scores: list[int]
    processed: list[int] = field(default_factory=list)
    next_id: int = 1
    iteration: int = 0

    @classmethod
    def from_views(cls, views: Sequence[RenderedView]) -> GlobalLabelState:
        """Start with every local instance unassigned."""
        return cls(
            mapping=[dict.fromkeys(view.instance_ids(), UNASSIGNED) for view in views],
            error_scores=[0] * len(views),
        )

    def unassigned(self, view: int) -> list[int]:
        """Return the unassigned local ids of a view."""
        return [local for local, g in sorted(self.mapping[view].items()) if g == UNASSIGNED]

    @property
    def total_unassigned(self) -> int:
        """Return the unassigned local instances across views."""
        return sum(len(self.unassigned(v)) for v in range(len(self.mapping)))

    def mint(self) -> int:
        """Return a fresh global id."""
        new = self.next_id
        self.next_id += 1
        return new

    def merge_globals(self, source: int, target: int) -> None:
        """Rename a global id everywhere."""
        if source == target:
            return
        for view_map in self.mapping:
            for local, g in view_map.items():
                if g == source:
                    view_map[local] = target

    def coverage(self) -> float:
        """Return the fraction of local instances holding a global id."""
        total = sum(len(m) for m in self.mapping)
        assigned = sum(1 for m in self.mapping for g in m.values() if g > 0)
        return assigned / total if total else 1.0

    def to_dict(self) -> dict[str, Any]:
        """Serialize the state."""
        return {
            "mapping": [{str(k): v for k, v in sorted(m.items())} for m in self.mapping],
            "error_scores": list(self.error_scores),
            "processed": list(self.processed),
            "next_id": self.next_id,
            "iteration": self.iteration,
        }


@dataclass
class MatchingResult:
    """Output of run_im."""

    state: GlobalLabelState
    instance_maps: list[LabelImage]
    semantic_maps: list[np.ndarray]
    trace: list[dict[str, Any]]
    stats: dict[str, Any]


def select_first_main(views: Sequence[RenderedView], seed: int) -> int:
    """Pick a random view among those whose instance count is most frequent."""
    if len(views) < 2:
        msg = "Matching needs at least two views"
        raise InvalidInputError(msg)
    counts = [len(view.instance_ids()) for view in views]
    frequency = Counter(counts)
    top = max(frequency.values())
    candidates = [i for i, c in enumerate(counts) if frequency[c] == top]
    return int(make_rng(seed).choice(candidates))


def sample_instance_points(
    mask: np.ndarray,
    target: int = SAMPLE_TARGET,
    step_cap: int = SAMPLE_STEP_CAP,
    minimum: int = SAMPLE_MIN,
) -> IntArray:
    """Sample (row, col) pixels of a mask on a grid over its bounding rectangle."""
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        msg = "Cannot sample an empty mask"
        raise InvalidInputError(msg)
    step = min(max(math.ceil(math.sqrt(len(rows) / target)), 1), step_cap)
    top, left = rows.min(), cols.min()
    on_grid = ((rows - top) % step == 0) & ((cols - left) % step == 0)
    if on_grid.sum() < minimum:
        on_grid[:] = True
    return np.stack([rows[on_grid], cols[on_grid]], axis=1)


def _lift(
    main: int, samples: dict[int, IntArray], depth_source: DepthSource, cameras: Sequence[CameraPair]
) -> tuple[FloatArray, IntArray, dict[int, int]]:
    """Lift sampled main pixels to world points; return points, labels and skip counts."""
    intr, pose = cameras[main]
    points: list[FloatArray] = []
    labels: list[IntArray] = []
    skipped: dict[int, int] = {}
    for main_id, pixels in samples.items():
        rows, cols = pixels[:, 0], pixels[:, 1]
        depth = depth_source.pixel_depth(main, rows, cols)
        valid = np.isfinite(depth)
        skipped[main_id] = int((~valid).sum())
        centers = np.stack([cols[valid] + 0.5, rows[valid] + 0.5], axis=1)
        dirs = pixel_directions(centers, intr, pose)
        points.append(pose.center + depth[valid, None] * dirs)
        labels.append(np.full(int(valid.sum()), main_id, dtype=np.int64))
    if not points:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64), skipped
    return np.concatenate(points), np.concatenate(labels), skipped


def _vote_view(
    aux: int,
    points: FloatArray,
    labels: IntArray,
    main_ids: list[int],
    instance_map: LabelImage,
    camera: CameraPair,
    depth_source: DepthSource,
    tolerance: float,
) -> tuple[dict[int, Counter[int]], dict[int, Counter[int]]]:
    """Vote every lifted point into one aux view."""
    intr, pose = camera
    view = CameraView(intrinsics=intr, pose=pose, depth=depth_source.depth_map(aux))
    codes = visibility(points, view, tolerance)
    uv, _ = project_points(points, intr, pose)
    keys = np.full(len(points), VOTE_OUT, dtype=np.int64)
    keys[codes == Visibility.OCCLUDED] = VOTE_OCC
    visible = codes == Visibility.VISIBLE
    cols = np.floor(uv[visible, 0]).astype(np.int64)
    rows = np.floor(uv[visible, 1]).astype(np.int64)
    keys[visible] = instance_map[rows, cols]
    forward = {m: Counter(keys[labels == m].tolist()) for m in main_ids}
    inverse: dict[int, Counter[int]] = {}
    landed = keys > 0
    for aux_id, main_id in zip(keys[landed].tolist(), labels[landed].tolist(), strict=True):
        inverse.setdefault(aux_id, Counter())[main_id] += 1
    return forward, inverse


def cast_votes(  # noqa: PLR0913
    main: int,
    main_ids: list[int],
    views: Sequence[RenderedView],
    depth_source: DepthSource,
    cameras: Sequence[CameraPair],
    tolerance: float,
    config: MatchingConfig | None = None,
) -> tuple[ForwardVoteTable, InverseVoteTable]:
    """Build forward and inverse vote tables for some instances of a main view."""
    config = config or MatchingConfig()
    samples = {
        m: sample_instance_points(
            views[main].instance == m, config.sample_target, config.step_cap, config.sample_min
        )
        for m in main_ids
    }
    points, labels, skipped = _lift(main, samples, depth_source, cameras)
    aux_views = [v for v in range(len(views)) if v != main]
    forward = ForwardVoteTable(
        main_view=main, main_ids=list(main_ids), aux_views=aux_views, skipped=skipped
    )
    inverse = InverseVoteTable(main_view=main)

    def vote(aux: int) -> tuple[dict[int, Counter[int]], dict[int, Counter[int]]]:
        return _vote_view(
            aux, points, labels, main_ids, views[aux].instance, cameras[aux], depth_source, tolerance
        )

    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        results = list(pool.map(vote, aux_views))
    for aux, (fwd_cells, inv_cells) in zip(aux_views, results, strict=True):
        for main_id, cell in fwd_cells.items():
            forward.cells[(main_id, aux)] = cell
        inverse.cells[aux] = inv_cells
    _LOGGER.debug(
        "Cast votes from view %s: %s instances, %s points into %s views, %s skipped",
        main,
        len(main_ids),
        len(points),
        len(aux_views),
        sum(skipped.values()),
    )
    return forward, inverse


def _majority(count: int, total: int) -> bool:
    return total > 0 and count > total / 2


def _groups(pairs: list[tuple[int, int]]) -> list[tuple[int, ...]]:
    """Return connected components of an undirected pair list."""
    parent: dict[int, int] = {}

    def find(x: int) -> int:
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    components: dict[int, list[int]] = {}
    for node in sorted(parent):
        components.setdefault(find(node), []).append(node)
    return [tuple(c) for c in components.values()]


def _is_piece(
    inv: InverseVoteTable, fwd: ForwardVoteTable, aux_view: int, aux_id: int, main_id: int
) -> bool:
    return inv.cell(aux_view, aux_id)[main_id] >= MIN_PIECE_SHARE * fwd.informative(
        main_id, aux_view
    )


def detect_errors(
    fwd: ForwardVoteTable,
    inv: InverseVoteTable,
    min_support: float = MIN_INVERSE_SUPPORT,
) -> ErrorReport:
    """Detect abnormal segmentations from one main view's vote tables."""
    report = ErrorReport()
    informative = {
        m: [v for v in fwd.aux_views if fwd.informative(m, v) > 0] for m in fwd.main_ids
    }
    argmax = {(m, v): fwd.argmax(m, v) for m in fwd.main_ids for v in fwd.aux_views}
    inverse_argmax = {
        (v, a): inv.argmax(v, a, fwd, min_support) for v in fwd.aux_views for a in inv.aux_ids(v)
    }

    background: set[int] = set()
    for m in fwd.main_ids:
        hits = sum(1 for v in informative[m] if argmax[(m, v)] == VOTE_BG)
        if _majority(hits, len(informative[m])):
            background.add(m)
            report.findings.append(
                Finding(ErrorPattern.BACKGROUND, (m,), fraction=hits / len(informative[m]))
            )

    pairs = []
    best_fraction: dict[tuple[int, int], float] = {}
    candidates = [m for m in fwd.main_ids if m not in background]
    for i, m1 in enumerate(candidates):
        for m2 in candidates[i + 1 :]:
            shared = set(informative[m1]) & set(informative[m2])
            same = sum(
                1
                for v in shared
                if argmax[(m1, v)] is not None
                and argmax[(m1, v)] > 0
                and argmax[(m1, v)] == argmax[(m2, v)]
            )
            if _majority(same, len(shared)):
                pairs.append((m1, m2))
                best_fraction[(m1, m2)] = same / len(shared)
    over_groups = _groups(pairs)
    group_of: dict[int, tuple[int, ...]] = {}
    for group in over_groups:
        fraction = max(f for (a, b), f in best_fraction.items() if a in group and b in group)
        report.findings.append(Finding(ErrorPattern.OVER_MAIN, group, fraction=fraction))
        for m in group:
            group_of[m] = group

    under: set[int] = set()
    for m in fwd.main_ids:
        if m in background:
            continue
        split_views = 0
        for v in informative[m]:
            pieces = [
                a
                for a in inv.aux_ids(v)
                if inverse_argmax[(v, a)] == m and _is_piece(inv, fwd, v, a, m)
            ]
            split_views += len(pieces) >= 2
        if _majority(split_views, len(informative[m])):
            under.add(m)
            report.findings.append(
                Finding(ErrorPattern.UNDER_MAIN, (m,), fraction=split_views / len(informative[m]))
            )

    share = 1.0 / max(len(fwd.aux_views), 1)
    for v in fwd.aux_views:
        by_main: dict[int, list[int]] = {}
        for a in inv.aux_ids(v):
            k = inverse_argmax[(v, a)]
            if k is not None and _is_piece(inv, fwd, v, a, k):
                by_main.setdefault(k, []).append(a)
        for k, pieces in sorted(by_main.items()):
            if len(pieces) >= 2 and k not in under and k not in background:
                report.findings.append(
                    Finding(ErrorPattern.OVER_AUX, (k,), v, tuple(sorted(pieces)), share)
                )

        by_aux: dict[int, list[int]] = {}
        for m in candidates:
            a = argmax[(m, v)]
            if a is not None and a > 0:
                by_aux.setdefault(a, []).append(m)
        for a, mains in sorted(by_aux.items()):
            if len(mains) >= 2 and len({group_of.get(m, (m,)) for m in mains}) > 1:
                report.findings.append(
                    Finding(ErrorPattern.UNDER_AUX, tuple(mains), v, (a,), share)
                )

        for m in candidates:
            if m in under or m in group_of:
                continue
            if argmax[(m, v)] == VOTE_BG:
                report.findings.append(Finding(ErrorPattern.LOSS, (m,), v, (), share))

    _LOGGER.debug("Main view %s findings: %s", fwd.main_view, report.counts())
    return report


def _adopted_global(
    state: GlobalLabelState, group: tuple[int, ...], fwd: ForwardVoteTable
) -> int | None:
    """Return the most frequent global id among assigned forward counterparts."""
    votes: Counter[int] = Counter()
    for m in group:
        for v in fwd.aux_views:
            a = fwd.argmax(m, v)
            if a is not None and a > 0:
                g = state.mapping[v].get(a, UNASSIGNED)
                if g > 0:
                    votes[g] += 1
    if not votes:
        return None
    return min(votes, key=lambda g: (-votes[g], g))


def apply_strategies(
    state: GlobalLabelState,
    report: ErrorReport,
    fwd: ForwardVoteTable,
    inv: InverseVoteTable,
    min_support: float = MIN_INVERSE_SUPPORT,
) -> GlobalLabelState:
    """Fold one main view's votes and findings into the global state."""
    main = fwd.main_view
    main_map = state.mapping[main]

    for m in report.flagged_main(ErrorPattern.BACKGROUND):
        main_map[m] = ELIMINATED

    flagged_aux: set[tuple[int, int]] = set()
    for finding in report.of(ErrorPattern.UNDER_AUX) + report.of(ErrorPattern.LOSS):
        if finding.aux_view is not None:
            state.error_scores[finding.aux_view] += 1
        if finding.pattern == ErrorPattern.UNDER_AUX:
            flagged_aux.update((finding.aux_view, a) for a in finding.aux_ids)

    skip = report.flagged_main(ErrorPattern.BACKGROUND) | report.flagged_main(
        ErrorPattern.UNDER_MAIN
    )
    grouped = {m for f in report.of(ErrorPattern.OVER_MAIN) for m in f.main_ids}
    groups = [f.main_ids for f in report.of(ErrorPattern.OVER_MAIN)]
    groups += [(m,) for m in fwd.main_ids if m not in grouped and m not in skip]

    for group in groups:
        existing = sorted({main_map[m] for m in group if main_map.get(m, UNASSIGNED) > 0})
        if existing:
            target = existing[0]
            for other in existing[1:]:
                state.merge_globals(other, target)
        else:
            adopted = _adopted_global(state, group, fwd)
            target = adopted if adopted is not None else state.mint()
        for m in group:
            main_map[m] = target

    for finding in report.of(ErrorPattern.OVER_AUX):
        target = main_map.get(finding.main_ids[0], UNASSIGNED)
        if target <= 0 or finding.aux_view is None:
            continue
        aux_map = state.mapping[finding.aux_view]
        for a in finding.aux_ids:
            current = aux_map.get(a, UNASSIGNED)
            if current == UNASSIGNED:
                aux_map[a] = target
            elif current > 0 and current != target:
                state.merge_globals(current, target)

    for v in fwd.aux_views:
        aux_map = state.mapping[v]
        for a in inv.aux_ids(v):
            if aux_map.get(a, ELIMINATED) != UNASSIGNED or (v, a) in flagged_aux:
                continue
            k = inv.argmax(v, a, fwd, min_support)
            if k is None or main_map.get(k, UNASSIGNED) <= 0:
                continue
            if fwd.argmax(k, v) == a:
                aux_map[a] = main_map[k]
    return state


def select_next_main(
    state: GlobalLabelState, config: MatchingConfig | None = None
) -> int | None:
    """Return the next main view, or None when matching is done."""
    config = config or MatchingConfig()
    n_views = len(state.mapping)
    processed = set(state.processed)
    if (
        len(processed) >= n_views
        or state.iteration >= config.max_iterations
        or state.total_unassigned < config.unassigned_threshold
    ):
        return None
    candidates = sorted(
        {(v + step) % n_views for v in processed for step in (-1, 1)} - processed
    ) or sorted(set(range(n_views)) - processed)
    unassigned = {v: len(state.unassigned(v)) for v in candidates}
    max_count = max(max(unassigned.values()), 1)
    total_flags = sum(state.error_scores)
    scores = {
        v: unassigned[v] / max_count - state.error_scores[v] / (1 + total_flags)
        for v in candidates
    }
    return min(candidates, key=lambda v: (-scores[v], v))


def _match_view(  # noqa: PLR0913
    state: GlobalLabelState,
    main: int,
    main_ids: list[int],
    views: Sequence[RenderedView],
    depth_source: DepthSource,
    cameras: Sequence[CameraPair],
    tolerance: float,
    config: MatchingConfig,
) -> tuple[ErrorReport, ForwardVoteTable]:
    fwd, inv = cast_votes(main, main_ids, views, depth_source, cameras, tolerance, config)
    report = detect_errors(fwd, inv, config.min_inverse_support)
    apply_strategies(state, report, fwd, inv, config.min_inverse_support)
    return report, fwd


def run_im(  # noqa: PLR0913
    views: Sequence[RenderedView],
    depth_source: DepthSource,
    cameras: Sequence[CameraPair],
    bounds: Bounds,
    config: MatchingConfig | None = None,
    seed: int = 0,
) -> MatchingResult:
    """Unify per-view instance ids into global ids."""
    config = config or MatchingConfig()
    tolerance = config.depth_tolerance_fraction * bounds_diagonal(bounds)
    state = GlobalLabelState.from_views(views)
    trace: list[dict[str, Any]] = []
    skipped_points = 0
    main: int | None = select_first_main(views, seed)
    while main is not None:
        main_ids = [m for m in views[main].instance_ids() if state.mapping[main][m] != ELIMINATED]
        report, fwd = _match_view(
            state, main, main_ids, views, depth_source, cameras, tolerance, config
        )
        skipped_points += sum(fwd.skipped.values())
        state.processed.append(main)
        state.iteration += 1
        trace.append(
            {
                "iteration": state.iteration,
                "main_view": main,
                "findings": report.counts(),
                "unassigned": state.total_unassigned,
            }
        )
        _LOGGER.debug(
            "Iteration %s on view %s leaves %s unassigned",
            state.iteration,
            main,
            state.total_unassigned,
        )
        main = select_next_main(state, config)

    swept = 0
    if config.orphan_sweep:
        for view in range(len(views)):
            orphans = state.unassigned(view)
            if not orphans:
                continue
            report, fwd = _match_view(
                state, view, orphans, views, depth_source, cameras, tolerance, config
            )
            skipped_points += sum(fwd.skipped.values())
            swept += 1
            trace.append({"sweep_view": view, "findings": report.counts()})

    coverage = state.coverage()
    minted_at_end = 0
    for view_map in state.mapping:
        for local in sorted(view_map):
            if view_map[local] == UNASSIGNED:
                view_map[local] = state.mint()
                minted_at_end += 1

    instance_maps = []
    semantic_maps = []
    for index, view in enumerate(views):
        lookup = np.zeros(int(view.instance.max()) + 1, dtype=np.int64)
        for local, g in state.mapping[index].items():
            lookup[local] = g
        relabeled = lookup[view.instance]
        semantic = np.where(relabeled > 0, view.semantic, 0).astype(np.uint8)
        instance_maps.append(relabeled)
        semantic_maps.append(semantic)

    stats = {
        "iterations": state.iteration,
        "processed_views": list(state.processed),
        "swept_views": swept,
        "coverage_before_fill": coverage,
        "minted_at_end": minted_at_end,
        "skipped_points": skipped_points,
        "global_ids": len({g for m in state.mapping for g in m.values() if g > 0}),
    }
    if coverage < 0.5:
        _LOGGER.warning("Instance matching assigned only %.0f%% of local instances", 100 * coverage)
    _LOGGER.info(
        "Instance matching finished after %s iterations with %s global ids",
        state.iteration,
        stats["global_ids"],
    )
    return MatchingResult(
        state=state,
        instance_maps=instance_maps,
        semantic_maps=semantic_maps,
        trace=trace,
        stats=stats,
    )


def label_consistency(relabeled: Sequence[LabelImage], truth: Sequence[LabelImage]) -> float:
    """Return the share of foreground truth pixels whose final and true ids are mutual majorities."""
    pred = np.concatenate([np.asarray(r).ravel() for r in relabeled])
    true = np.concatenate([np.asarray(t).ravel() for t in truth])
    foreground = true > 0
    pred, true = pred[foreground], true[foreground]
    if len(true) == 0:
        return 1.0
    pairs = Counter(zip(pred.tolist(), true.tolist(), strict=True))
    best_truth: dict[int, tuple[int, int]] = {}
    best_pred: dict[int, tuple[int, int]] = {}
    for (p, t), count in sorted(pairs.items()):
        if count > best_truth.get(p, (0, 0))[0]:
            best_truth[p] = (count, t)
        if count > best_pred.get(t, (0, 0))[0]:
            best_pred[t] = (count, p)
    agreed = sum(
        count
        for (p, t), count in pairs.items()
        if p > 0 and best_truth[p][1] == t and best_pred[t][1] == p
    )
    return agreed / len(true)
