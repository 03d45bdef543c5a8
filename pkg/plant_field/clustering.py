"""DBSCAN instance baseline over a semantic-only point cloud."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy.spatial import cKDTree
from sklearn.cluster import DBSCAN

from .const import _LOGGER, CLASS_BACKGROUND
from .evaluation import instance_metrics
from .exceptions import InvalidInputError

if TYPE_CHECKING:
    from collections.abc import Sequence
    from pathlib import Path

    from .data import FloatArray, IntArray

EPS_MULTIPLIERS = (0.5, 1.0, 2.0, 4.0)
MIN_PTS_GRID = (4, 8, 16)


@dataclass(frozen=True, order=True)
class DBSCANParams:
    """Neighborhood radius and minimum neighbor count (self included)."""

    eps: float
    min_pts: int

    def __post_init__(self) -> None:
        """Validate the parameters."""
        if not self.eps > 0:
            msg = f"eps must be positive, got {self.eps}"
            raise InvalidInputError(msg)
        if self.min_pts < 1:
            msg = f"min_pts must be at least 1, got {self.min_pts}"
            raise InvalidInputError(msg)


@dataclass
class TuningResult:
    """Best grid cell, its partition and the whole sweep."""

    params: DBSCANParams
    instances: IntArray
    m_wcov: float
    sweep: list[tuple[float, int, float]] = field(default_factory=list)


def dbscan(points: FloatArray, params: DBSCANParams, workers: int = 1) -> IntArray:
    """Cluster points; ids start at 1 in discovery order and noise is 0."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(points):
        msg = "DBSCAN needs at least one point"
        raise InvalidInputError(msg)
    labels = DBSCAN(
        eps=params.eps, min_samples=params.min_pts, algorithm="kd_tree", n_jobs=workers
    ).fit_predict(points)
    return labels.astype(np.int64) + 1


def mean_neighbor_distance(points: FloatArray) -> float:
    """Return the mean distance from each point to its nearest other point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 2:  # noqa: PLR2004
        msg = "Need at least two points for a neighbor distance"
        raise InvalidInputError(msg)
    distance, _ = cKDTree(points).query(points, k=2)
    return float(distance[:, 1].mean())


def default_grid(points: FloatArray) -> list[DBSCANParams]:
    """Return the scale-adaptive eps x min_pts grid."""
    scale = mean_neighbor_distance(points)
    if scale <= 0:
        msg = "Points are all coincident; no eps scale"
        raise InvalidInputError(msg)
    return [
        DBSCANParams(eps=factor * scale, min_pts=min_pts)
        for factor in EPS_MULTIPLIERS
        for min_pts in MIN_PTS_GRID
    ]


def cluster_by_class(
    points: FloatArray, semantic: IntArray, params: DBSCANParams, workers: int = 1
) -> IntArray:
    """Cluster each foreground class separately and merge into one partition."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    semantic = np.asarray(semantic, dtype=np.int64).ravel()
    instances = np.zeros(len(points), dtype=np.int64)
    offset = 0
    for cls in np.unique(semantic):
        if cls == CLASS_BACKGROUND:
            continue
        members = np.flatnonzero(semantic == cls)
        labels = dbscan(points[members], params, workers)
        clustered = labels > 0
        instances[members[clustered]] = labels[clustered] + offset
        offset += int(labels.max())
    return instances


def tune_dbscan(
    points: FloatArray,
    semantic: IntArray,
    gt_instances: IntArray,
    grid: Sequence[DBSCANParams] | None = None,
    workers: int = 1,
) -> TuningResult:
    """Return the grid cell maximizing mWCov; ties go to smaller eps, then min_pts."""
    grid = sorted(grid if grid is not None else default_grid(points))
    if not grid:
        msg = "DBSCAN grid is empty"
        raise InvalidInputError(msg)
    results: list[TuningResult] = []
    for params in grid:
        instances = cluster_by_class(points, semantic, params, workers)
        score = instance_metrics(instances, gt_instances).m_wcov
        results.append(TuningResult(params=params, instances=instances, m_wcov=score))
        _LOGGER.debug("DBSCAN eps=%s min_pts=%s mWCov=%.4f", params.eps, params.min_pts, score)
    # max keeps the first of equal scores, so the grid order breaks ties.
    best = max(results, key=lambda result: result.m_wcov)
    best.sweep = [(r.params.eps, r.params.min_pts, r.m_wcov) for r in results]
    _LOGGER.info(
        "Best DBSCAN cell eps=%s min_pts=%s with mWCov %.4f",
        best.params.eps,
        best.params.min_pts,
        best.m_wcov,
    )
    return best


def write_sweep_csv(path: Path, sweep: list[tuple[float, int, float]]) -> None:
    """Write the (eps, min_pts, mWCov) sweep report."""
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["eps", "min_pts", "mWCov"])
        writer.writerows(sweep)
