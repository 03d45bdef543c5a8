"""Tests for the DBSCAN instance baseline."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import pytest
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from plant_field.clustering import (
    DBSCANParams,
    cluster_by_class,
    dbscan,
    default_grid,
    mean_neighbor_distance,
    tune_dbscan,
    write_sweep_csv,
)
from plant_field.data import make_rng
from plant_field.exceptions import InvalidInputError

if TYPE_CHECKING:
    from pathlib import Path


def _blob(center: tuple[float, float, float], count: int = 20, seed: int = 0) -> np.ndarray:
    """Return points in a small cube around a center."""
    return np.asarray(center) + make_rng(seed).uniform(-0.01, 0.01, (count, 3))


def _two_blobs_and_noise() -> np.ndarray:
    """Return two tight blobs plus one isolated point."""
    return np.concatenate(
        [_blob((0.0, 0.0, 0.0)), _blob((1.0, 0.0, 0.0), seed=1), [[0.5, 0.5, 0.5]]]
    )


def _same_partition(first: np.ndarray, second: np.ndarray) -> bool:
    """Return whether two labelings agree up to renaming."""
    pairs = set(zip(first.tolist(), second.tolist(), strict=True))
    return len(pairs) == len(set(first.tolist())) == len(set(second.tolist()))


def test_two_blobs_and_noise() -> None:
    """Test blobs get ids in discovery order and the outlier is noise."""
    labels = dbscan(_two_blobs_and_noise(), DBSCANParams(eps=0.1, min_pts=4))

    assert labels[:20].tolist() == [1] * 20
    assert labels[20:40].tolist() == [2] * 20
    assert labels[40] == 0


def test_min_pts_one_gives_connected_components() -> None:
    """Test every point is core with min_pts 1, so clusters are radius-graph components."""
    rng = make_rng(2)
    points = rng.uniform(0, 1, (300, 3))
    eps = 0.08

    labels = dbscan(points, DBSCANParams(eps=eps, min_pts=1))

    pairs = np.array(sorted(cKDTree(points).query_pairs(eps)))
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(300, 300))
    _, components = connected_components(graph, directed=False)
    assert (labels > 0).all()
    assert _same_partition(labels, components)


def test_dbscan_rejects_empty_input() -> None:
    """Test an empty cloud raises."""
    with pytest.raises(InvalidInputError):
        dbscan(np.zeros((0, 3)), DBSCANParams(eps=0.1, min_pts=1))


def test_params_validation_and_order() -> None:
    """Test invalid parameters raise and cells sort by eps then min_pts."""
    with pytest.raises(InvalidInputError):
        DBSCANParams(eps=0.0, min_pts=4)
    with pytest.raises(InvalidInputError):
        DBSCANParams(eps=0.1, min_pts=0)
    cells = [DBSCANParams(0.2, 4), DBSCANParams(0.1, 8), DBSCANParams(0.1, 4)]
    assert sorted(cells) == [DBSCANParams(0.1, 4), DBSCANParams(0.1, 8), DBSCANParams(0.2, 4)]


def test_mean_neighbor_distance_and_grid() -> None:
    """Test the eps scale on a unit lattice and the size of the default grid."""
    lattice = np.stack(np.meshgrid(*[np.arange(3.0)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)

    assert mean_neighbor_distance(lattice) == pytest.approx(1.0)
    grid = default_grid(lattice)
    assert len(grid) == 12
    assert sorted({cell.eps for cell in grid}) == pytest.approx([0.5, 1.0, 2.0, 4.0])
    with pytest.raises(InvalidInputError):
        mean_neighbor_distance(np.zeros((1, 3)))


def test_cluster_by_class_offsets_ids() -> None:
    """Test classes are clustered separately into one partition."""
    points = np.concatenate([_blob((0.0, 0.0, 0.0)), _blob((0.0, 0.0, 0.0), seed=4), _blob((1, 1, 1))])
    semantic = np.array([1] * 20 + [2] * 20 + [0] * 20)

    instances = cluster_by_class(points, semantic, DBSCANParams(eps=0.1, min_pts=4))

    assert set(instances[:20].tolist()) == {1}
    assert set(instances[20:40].tolist()) == {2}
    assert set(instances[40:].tolist()) == {0}


def test_tune_single_cell_grid() -> None:
    """Test a one-cell grid returns that cell and its score."""
    points = _two_blobs_and_noise()
    truth = np.array([1] * 20 + [2] * 20 + [3])
    cell = DBSCANParams(eps=0.1, min_pts=4)

    result = tune_dbscan(points, np.ones(41, dtype=np.int64), truth, grid=[cell])

    assert result.params == cell
    assert result.sweep == [(0.1, 4, result.m_wcov)]
    assert result.m_wcov == pytest.approx(40 / 41)


def test_tune_ties_keep_smaller_eps() -> None:
    """Test equal scores keep the smaller eps and then the smaller min_pts."""
    points = np.concatenate([_blob((0.0, 0.0, 0.0)), _blob((1.0, 0.0, 0.0), seed=1)])
    truth = np.array([1] * 20 + [2] * 20)
    grid = [DBSCANParams(0.2, 4), DBSCANParams(0.1, 8), DBSCANParams(0.1, 4)]

    result = tune_dbscan(points, np.ones(40, dtype=np.int64), truth, grid=grid)

    assert result.params == DBSCANParams(0.1, 4)
    assert result.m_wcov == 1.0
    assert [(eps, min_pts) for eps, min_pts, _ in result.sweep] == [(0.1, 4), (0.1, 8), (0.2, 4)]


def test_sweep_csv(tmp_path: Path) -> None:
    """Test the sweep report header and rows."""
    path = tmp_path / "sweep.csv"

    write_sweep_csv(path, [(0.1, 4, 0.5), (0.2, 8, 0.75)])

    assert path.read_text().splitlines() == ["eps,min_pts,mWCov", "0.1,4,0.5", "0.2,8,0.75"]


def _reference_dbscan(
    points: np.ndarray, eps: float, min_pts: int
) -> tuple[np.ndarray, list[set[int]]]:
    """Cluster by brute force; return core labels and the clusters each border point may join.

    Clusters are numbered by their smallest core index. Non-core entries of the
    label array are 0 and their candidate sets are empty for noise.
    """
    distance = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    neighbors = distance <= eps
    core = neighbors.sum(axis=1) >= min_pts
    labels = np.zeros(len(points), dtype=np.int64)
    cluster = 0
    for seed in range(len(points)):
        if not core[seed] or labels[seed]:
            continue
        cluster += 1
        labels[seed] = cluster
        queue = [seed]
        while queue:
            current = queue.pop()
            for other in np.flatnonzero(neighbors[current] & core).tolist():
                if not labels[other]:
                    labels[other] = cluster
                    queue.append(other)
    candidates = [
        set() if core[i] else set(labels[neighbors[i] & core].tolist())
        for i in range(len(points))
    ]
    return labels, candidates


@pytest.mark.parametrize("seed", range(50))
def test_dbscan_matches_brute_force(seed: int) -> None:
    """Test core ids, noise and border choices against an exhaustive reference."""
    rng = make_rng(100 + seed)
    centers = rng.uniform(0.0, 1.0, (3, 3))
    points = np.concatenate(
        [centers[k] + rng.normal(0.0, 0.04, (40, 3)) for k in range(3)]
        + [rng.uniform(0.0, 1.0, (30, 3))]
    )
    eps = float(rng.uniform(0.04, 0.12))
    min_pts = int(rng.integers(2, 9))

    labels = dbscan(points, DBSCANParams(eps=eps, min_pts=min_pts))

    expected, candidates = _reference_dbscan(points, eps, min_pts)
    core = expected > 0
    assert labels[core].tolist() == expected[core].tolist()
    for index in np.flatnonzero(~core).tolist():
        if candidates[index]:
            assert labels[index] in candidates[index]
        else:
            assert labels[index] == 0
