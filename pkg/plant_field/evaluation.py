"""Semantic, instance and completeness metrics for labeled point clouds."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy.spatial import cKDTree

from .const import (
    _LOGGER,
    CLASS_BACKGROUND,
    COMPLETENESS_EPS,
    INSTANCE_IOU_THRESHOLD,
    SEMANTIC_CLASSES,
)
from .data import bounds_diagonal
from .exceptions import InvalidInputError

if TYPE_CHECKING:
    from collections.abc import Iterable
    from pathlib import Path

    from .data import FloatArray, IntArray, LabeledPointCloud
    from .scene import SceneSpec

TRANSFER_CHUNK = 65536


@dataclass(frozen=True)
class EvaluationConfig:
    """Metric settings."""

    completeness_eps: float = COMPLETENESS_EPS
    normalize_diagonal: bool = True
    iou_threshold: float = INSTANCE_IOU_THRESHOLD


@dataclass(frozen=True)
class ConfusionCounts:
    """Point counts for one semantic class."""

    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        """Return TP / (TP + FP)."""
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        """Return TP / (TP + FN)."""
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        """Return the harmonic mean of precision and recall."""
        total = self.precision + self.recall
        return 2 * self.precision * self.recall / total if total else 0.0

    @property
    def iou(self) -> float:
        """Return TP / (TP + FP + FN)."""
        union = self.tp + self.fp + self.fn
        return self.tp / union if union else 0.0

    @property
    def present(self) -> bool:
        """Return whether the class occurs on either side."""
        return self.tp + self.fp + self.fn > 0

    def scores(self) -> dict[str, float]:
        """Return the four scores by name."""
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "iou": self.iou,
        }


@dataclass(frozen=True)
class SemanticReport:
    """Per-class confusion counts plus macro averages over present classes."""

    per_class: dict[int, ConfusionCounts]

    @property
    def macro(self) -> dict[str, float]:
        """Return scores averaged over classes present on either side."""
        present = [counts.scores() for counts in self.per_class.values() if counts.present]
        if not present:
            return dict.fromkeys(("precision", "recall", "f1", "iou"), 0.0)
        return {key: float(np.mean([s[key] for s in present])) for key in present[0]}

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON record."""
        return {
            "per_class": {
                SEMANTIC_CLASSES.get(cls, str(cls)): {**asdict(counts), **counts.scores()}
                for cls, counts in sorted(self.per_class.items())
            },
            "macro": self.macro,
        }


@dataclass(frozen=True)
class InstanceMatchTable:
    """IoU between ground-truth instances (rows) and predicted instances (columns)."""

    gt_ids: IntArray
    pred_ids: IntArray
    iou: FloatArray
    gt_sizes: IntArray

    @property
    def num_gt(self) -> int:
        """Return |R|."""
        return len(self.gt_ids)

    @property
    def num_pred(self) -> int:
        """Return |O|."""
        return len(self.pred_ids)

    def true_positives(self, threshold: float = INSTANCE_IOU_THRESHOLD) -> int:
        """Return predicted instances whose best ground-truth IoU exceeds the threshold."""
        if not self.num_gt or not self.num_pred:
            return 0
        return int((self.iou.max(axis=0) > threshold).sum())


@dataclass(frozen=True)
class InstanceMetrics:
    """mPrec, mRec, mCov and mWCov."""

    m_prec: float
    m_rec: float
    m_cov: float
    m_wcov: float
    true_positives: int
    num_gt: int
    num_pred: int
    empty_prediction: bool = False

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON record."""
        return {
            "mPrec": self.m_prec,
            "mRec": self.m_rec,
            "mCov": self.m_cov,
            "mWCov": self.m_wcov,
            "true_positives": self.true_positives,
            "num_gt": self.num_gt,
            "num_pred": self.num_pred,
            "empty_prediction": self.empty_prediction,
        }


@dataclass
class MetricReport:
    """Everything reported for one evaluated cloud."""

    semantic: SemanticReport
    instance: InstanceMetrics
    completeness: float
    completeness_eps: float
    num_points: int
    config_hash: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON record."""
        return {
            "semantic": self.semantic.to_dict(),
            "instance": self.instance.to_dict(),
            "completeness": {"value": self.completeness, "eps": self.completeness_eps},
            "num_points": self.num_points,
            "config_hash": self.config_hash,
            **self.extra,
        }


def transfer_labels(positions: FloatArray, scene: SceneSpec) -> tuple[IntArray, IntArray]:
    """Label each point with the class and id of the nearest primitive surface."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    primitives = sorted(scene.primitives, key=lambda p: p.instance_id)
    classes = np.array([p.semantic_class for p in primitives], dtype=np.int64)
    ids = np.array([p.instance_id for p in primitives], dtype=np.int64)
    nearest = np.empty(len(positions), dtype=np.int64)
    for start in range(0, len(positions), TRANSFER_CHUNK):
        chunk = positions[start : start + TRANSFER_CHUNK]
        distances = np.stack([p.surface_distance(chunk) for p in primitives], axis=1)
        # argmin keeps the first minimum, so ties go to the lower id
        nearest[start : start + len(chunk)] = np.argmin(distances, axis=1)
    return classes[nearest], ids[nearest]


def _check_lengths(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        msg = f"Label lists differ in length: {pred.shape} vs {gt.shape}"
        raise InvalidInputError(msg)


def semantic_metrics(
    pred: IntArray, gt: IntArray, classes: Iterable[int] | None = None
) -> SemanticReport:
    """Return per-class confusion counts; background is excluded by default."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    _check_lengths(pred, gt)
    if classes is None:
        classes = sorted(set(np.unique(pred).tolist()) | set(np.unique(gt).tolist()))
        classes = [c for c in classes if c != CLASS_BACKGROUND]
    per_class = {}
    for cls in classes:
        predicted, actual = pred == cls, gt == cls
        per_class[int(cls)] = ConfusionCounts(
            tp=int((predicted & actual).sum()),
            fp=int((predicted & ~actual).sum()),
            fn=int((~predicted & actual).sum()),
        )
    return SemanticReport(per_class=per_class)


def instance_match_table(pred: IntArray, gt: IntArray) -> InstanceMatchTable:
    """Build the IoU table; id 0 on either side is not an instance."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    _check_lengths(pred, gt)
    gt_ids, gt_index = np.unique(gt, return_inverse=True)
    pred_ids, pred_index = np.unique(pred, return_inverse=True)
    counts = np.zeros((len(gt_ids), len(pred_ids)), dtype=np.int64)
    np.add.at(counts, (gt_index, pred_index), 1)
    gt_keep, pred_keep = gt_ids != 0, pred_ids != 0
    counts = counts[gt_keep][:, pred_keep]
    gt_sizes = np.bincount(gt_index, minlength=len(gt_ids))[gt_keep]
    pred_sizes = np.bincount(pred_index, minlength=len(pred_ids))[pred_keep]
    union = gt_sizes[:, None] + pred_sizes[None, :] - counts
    iou = np.divide(counts, union, out=np.zeros(counts.shape), where=union > 0)
    return InstanceMatchTable(
        gt_ids=gt_ids[gt_keep], pred_ids=pred_ids[pred_keep], iou=iou, gt_sizes=gt_sizes
    )


def instance_metrics(
    pred: IntArray, gt: IntArray, threshold: float = INSTANCE_IOU_THRESHOLD
) -> InstanceMetrics:
    """Return mPrec, mRec, mCov and mWCov of a predicted partition."""
    table = instance_match_table(pred, gt)
    tp = table.true_positives(threshold)
    if table.num_pred == 0:
        _LOGGER.warning("Instance metrics on an empty prediction; mPrec reported as 0")
    if table.num_gt == 0:
        return InstanceMetrics(0.0, 0.0, 0.0, 0.0, tp, 0, table.num_pred, table.num_pred == 0)
    best = table.iou.max(axis=1) if table.num_pred else np.zeros(table.num_gt)
    weights = table.gt_sizes / table.gt_sizes.sum()
    return InstanceMetrics(
        m_prec=tp / table.num_pred if table.num_pred else 0.0,
        m_rec=tp / table.num_gt,
        m_cov=float(best.mean()),
        m_wcov=float((weights * best).sum()),
        true_positives=tp,
        num_gt=table.num_gt,
        num_pred=table.num_pred,
        empty_prediction=table.num_pred == 0,
    )


def completeness(gt: FloatArray, test: FloatArray, eps: float = COMPLETENESS_EPS) -> float:
    """Return the fraction of ground-truth points with a test point within eps."""
    if eps <= 0:
        msg = f"Completeness threshold must be positive, got {eps}"
        raise InvalidInputError(msg)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    test = np.asarray(test, dtype=np.float64).reshape(-1, 3)
    if not len(gt) or not len(test):
        msg = "Completeness needs non-empty point sets"
        raise InvalidInputError(msg)
    distance, _ = cKDTree(test).query(gt)
    return float((distance <= eps).mean())


def evaluate_cloud(
    cloud: LabeledPointCloud,
    scene: SceneSpec,
    gt_cloud: LabeledPointCloud,
    config: EvaluationConfig | None = None,
    config_hash: str = "",
) -> MetricReport:
    """Score a predicted cloud against the analytic scene and its sampled cloud."""
    config = config or EvaluationConfig()
    if len(cloud) == 0:
        _LOGGER.warning("Evaluating an empty cloud")
        gt_semantic = gt_instance = np.zeros(0, dtype=np.int64)
        completeness_value = 0.0
    else:
        gt_semantic, gt_instance = transfer_labels(cloud.positions, scene)
        scale = 1.0 / bounds_diagonal(scene.bounds) if config.normalize_diagonal else 1.0
        completeness_value = completeness(
            gt_cloud.positions * scale, cloud.positions * scale, config.completeness_eps
        )
    semantic = semantic_metrics(cloud.semantic, gt_semantic, classes=SEMANTIC_CLASSES)
    instance = instance_metrics(cloud.instance, gt_instance, config.iou_threshold)
    _LOGGER.info(
        "Evaluated %s points: mean IoU %.4f, mWCov %.4f, completeness %.4f",
        len(cloud),
        semantic.macro["iou"],
        instance.m_wcov,
        completeness_value,
    )
    return MetricReport(
        semantic=semantic,
        instance=instance,
        completeness=completeness_value,
        completeness_eps=config.completeness_eps,
        num_points=len(cloud),
        config_hash=config_hash,
    )


def flatten_report(report: dict[str, Any], prefix: str = "") -> list[tuple[str, Any]]:
    """Return (dotted key, value) pairs of a nested report."""
    rows: list[tuple[str, Any]] = []
    for key, value in report.items():
        name = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, dict):
            rows.extend(flatten_report(value, name))
        else:
            rows.append((name, value))
    return rows


def write_report_csv(path: Path, report: dict[str, Any]) -> None:
    """Write a flat two-column CSV of a metric report."""
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", "value"])
        writer.writerows(flatten_report(report))
