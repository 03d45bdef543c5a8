"""Pipeline stages and the files they exchange.

Each stage writes under `<run>/<stage key>/` and reads only what earlier
stages wrote there.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from .camera import Intrinsics, camera_from_dict, camera_to_dict, ring_cameras
from .clustering import DBSCANParams, mean_neighbor_distance, tune_dbscan, write_sweep_csv
from .codec import Codebooks, allocate_codebooks, encode_targets
from .config import SECTION_SCHEMAS, stage_seed
from .const import _LOGGER, NUM_CLASSES
from .corruption import CorruptionLog, corrupt_labels, reconstruct_truth
from .data import LabeledPointCloud, as_bounds
from .evaluation import evaluate_cloud, instance_metrics, transfer_labels, write_report_csv
from .exceptions import InvalidInputError, ManifestError
from .extraction import extract_cloud, read_ply, write_ply
from .field import JointField, ParamStore, load_checkpoint, save_checkpoint
from .matching import RendererDepthSource, label_consistency, run_im
from .raster import read_json, read_view, write_json, write_view
from .renderer import TrainingView, train
from .scene import (
    RenderedView,
    build_plant,
    build_touching_leaves,
    render_view,
    sample_gt_cloud,
    scene_from_dict,
    scene_to_dict,
)

if TYPE_CHECKING:
    from collections.abc import Callable
    from pathlib import Path

    from .config import PipelineConfig
    from .data import Bounds
    from .matching import CameraPair
    from .scene import SceneSpec

STAGE_SYNTHGEN = "synthgen"
STAGE_CORRUPT = "corrupt"
STAGE_MATCH = "match"
STAGE_TRAIN = "train"
STAGE_EXTRACT = "extract"
STAGE_EVAL = "eval"
STAGE_CLUSTER = "cluster-baseline"


@dataclass
class StageContext:
    """What a stage needs to run."""

    config: PipelineConfig
    root: Path
    index: int
    key: str

    @property
    def seed(self) -> int:
        """Return the stage seed."""
        return stage_seed(self.config.seed, self.index)

    @property
    def directory(self) -> Path:
        """Return the stage output directory, creating it."""
        path = self.root / self.key
        path.mkdir(parents=True, exist_ok=True)
        return path

    def upstream(self, key: str) -> Path:
        """Return an earlier stage's directory."""
        return self.root / key


@dataclass
class StageOutput:
    """Files a stage read and wrote, plus its summary metrics."""

    inputs: list[Path] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)
    metrics: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True, kw_only=True)
class StageDescription:
    """Describe one pipeline stage."""

    key: str
    index: int
    requires: tuple[str, ...] = ()
    sections: tuple[str, ...] = ()
    run_fn: Callable[[StageContext], StageOutput]
    enabled_fn: Callable[[PipelineConfig], bool] = lambda _: True


def _require(path: Path) -> Path:
    if not path.exists():
        msg = f"Missing input {path}; run the upstream stage first"
        raise ManifestError(msg)
    return path


def load_scene(root: Path) -> SceneSpec:
    """Return the scene written by synthgen."""
    return scene_from_dict(read_json(_require(root / STAGE_SYNTHGEN / "scene.json")))


def load_cameras(root: Path) -> list[CameraPair]:
    """Return the cameras written by synthgen."""
    records = read_json(_require(root / STAGE_SYNTHGEN / "cameras.json"))
    return [camera_from_dict(record) for record in records]


def load_views(directory: Path, count: int) -> list[RenderedView]:
    """Return `count` views from a stage's view directory."""
    _require(directory)
    return [read_view(directory, index) for index in range(count)]


def load_field(root: Path, config: PipelineConfig, bounds: Bounds) -> tuple[JointField, Codebooks]:
    """Rebuild the trained field and its codebooks from the train stage."""
    train_dir = root / STAGE_TRAIN
    codebooks = Codebooks.from_dict(read_json(_require(train_dir / "codebooks.json")))
    jfield = JointField(bounds, config.field())
    store = ParamStore(jfield)
    load_checkpoint(_require(train_dir / "checkpoint.bin"), store)
    return jfield, codebooks


def _write_views(directory: Path, views: list[RenderedView]) -> list[Path]:
    paths = []
    for index, view in enumerate(views):
        paths += write_view(directory, index, view)
    return paths


def run_synthgen(ctx: StageContext) -> StageOutput:
    """Build the scene, render the capture ring and sample the ground-truth cloud."""
    scene_section = ctx.config.section("scene")
    capture = ctx.config.section("capture")
    bounds = as_bounds(*scene_section["bounds"])
    if scene_section["kind"] == "touching_leaves":
        scene = build_touching_leaves(ctx.seed, bounds)
    else:
        scene = build_plant(ctx.seed, scene_section["organs"], bounds)
    intr = Intrinsics.from_fov(capture["width"], capture["height"], capture["fov_degrees"])
    poses = ring_cameras(
        capture["views"], capture["radius"], capture["elevations"], target=(bounds[0] + bounds[1]) / 2
    )
    out = ctx.directory
    views = [render_view(scene, intr, pose) for pose in poses]
    outputs = _write_views(out / "views", views)
    write_json(out / "scene.json", scene_to_dict(scene))
    write_json(out / "cameras.json", [camera_to_dict(intr, pose) for pose in poses])
    gt_cloud = sample_gt_cloud(scene, scene_section["gt_points"], ctx.seed)
    write_ply(out / "gt_cloud.ply", gt_cloud)
    outputs += [out / "scene.json", out / "cameras.json", out / "gt_cloud.ply"]
    foreground = float(np.mean([np.mean(v.instance > 0) for v in views]))
    return StageOutput(
        outputs=outputs,
        metrics={
            "primitives": len(scene.primitives),
            "views": len(views),
            "foreground_fraction": foreground,
        },
    )


def run_corrupt(ctx: StageContext) -> StageOutput:
    """Permute local ids and inject segmentation errors."""
    cameras = load_cameras(ctx.root)
    source = ctx.upstream(STAGE_SYNTHGEN) / "views"
    views = load_views(source, len(cameras))
    corrupted, log = corrupt_labels(views, ctx.config.corruption(), ctx.seed)
    out = ctx.directory
    outputs = _write_views(out / "views", corrupted)
    write_json(out / "corruption_log.json", log.to_dict())
    outputs.append(out / "corruption_log.json")
    injected = Counter(str(event.pattern) for _, event in log.injected())
    return StageOutput(
        inputs=[source],
        outputs=outputs,
        metrics={"injected": dict(sorted(injected.items())), "skipped": len(log.skipped())},
    )


def run_match(ctx: StageContext) -> StageOutput:
    """Unify instance ids across views and score them against the injection log."""
    cameras = load_cameras(ctx.root)
    bounds = load_scene(ctx.root).bounds
    source = ctx.upstream(STAGE_CORRUPT)
    views = load_views(source / "views", len(cameras))
    log = CorruptionLog.from_dict(read_json(_require(source / "corruption_log.json")))
    depth_source = RendererDepthSource([v.depth for v in views], cameras, bounds)
    result = run_im(views, depth_source, cameras, bounds, ctx.config.matching(), ctx.seed)
    truth = [reconstruct_truth(view, log.views[i]) for i, view in enumerate(views)]
    consistency = label_consistency(result.instance_maps, truth)
    relabeled = [
        RenderedView(rgb=v.rgb, semantic=semantic, instance=instance, depth=v.depth)
        for v, semantic, instance in zip(
            views, result.semantic_maps, result.instance_maps, strict=True
        )
    ]
    out = ctx.directory
    outputs = _write_views(out / "views", relabeled)
    write_json(out / "matching.json", {"trace": result.trace, "stats": result.stats})
    outputs.append(out / "matching.json")
    return StageOutput(
        inputs=[source / "views", source / "corruption_log.json"],
        outputs=outputs,
        metrics={
            "label_consistency": consistency,
            "iterations": result.stats["iterations"],
            "global_ids": result.stats["global_ids"],
        },
    )


def run_train(ctx: StageContext) -> StageOutput:
    """Allocate codebooks and fit the joint field to the matched views."""
    cameras = load_cameras(ctx.root)
    bounds = load_scene(ctx.root).bounds
    source = ctx.upstream(STAGE_MATCH) / "views"
    views = load_views(source, len(cameras))
    ids = sorted({i for view in views for i in view.instance_ids()})
    codebooks = allocate_codebooks(NUM_CLASSES, ids)
    training_views = [
        TrainingView(
            intrinsics=intr,
            pose=pose,
            targets=encode_targets(view.rgb, view.semantic, view.instance, codebooks),
        )
        for (intr, pose), view in zip(cameras, views, strict=True)
    ]
    jfield = JointField(bounds, ctx.config.field(), ctx.seed)
    store = ParamStore(jfield)
    out = ctx.directory
    result = train(
        store,
        training_views,
        bounds,
        ctx.config.training(ctx.seed),
        codebooks,
        trace_path=out / "trace.csv",
    )
    save_checkpoint(out / "checkpoint.bin", store)
    write_json(out / "codebooks.json", codebooks.to_dict())
    write_json(out / "holdout.json", result.holdout)
    metrics: dict[str, Any] = {"codewords": len(ids), "holdout": result.holdout}
    if result.trace:
        metrics["final_loss"] = result.trace[-1]["total"]
    return StageOutput(
        inputs=[source],
        outputs=[out / "trace.csv", out / "checkpoint.bin", out / "codebooks.json", out / "holdout.json"],
        metrics=metrics,
    )


def run_extract(ctx: StageContext) -> StageOutput:
    """Turn the trained field into a labeled cloud."""
    cameras = load_cameras(ctx.root)
    bounds = load_scene(ctx.root).bounds
    jfield, codebooks = load_field(ctx.root, ctx.config, bounds)
    centers = np.array([pose.center for _, pose in cameras])
    result = extract_cloud(jfield, centers, codebooks, bounds, ctx.config.extraction(ctx.seed))
    out = ctx.directory
    write_ply(out / "cloud.ply", result.cloud, codebooks.digest())
    diagnostics = {"status": str(result.status), "reason": result.reason, **result.diagnostics}
    write_json(out / "diagnostics.json", diagnostics)
    return StageOutput(
        inputs=[ctx.upstream(STAGE_TRAIN) / "checkpoint.bin", ctx.upstream(STAGE_TRAIN) / "codebooks.json"],
        outputs=[out / "cloud.ply", out / "diagnostics.json"],
        metrics=diagnostics,
    )


def _read_cloud(ctx: StageContext) -> LabeledPointCloud:
    cloud, digest = read_ply(_require(ctx.upstream(STAGE_EXTRACT) / "cloud.ply"))
    codebooks = Codebooks.from_dict(read_json(_require(ctx.upstream(STAGE_TRAIN) / "codebooks.json")))
    if digest != codebooks.digest():
        msg = "Cloud was decoded with a different codebook than the trained field"
        raise ManifestError(msg)
    return cloud


def run_eval(ctx: StageContext) -> StageOutput:
    """Score the extracted cloud."""
    cloud = _read_cloud(ctx)
    scene = load_scene(ctx.root)
    gt_cloud, _ = read_ply(_require(ctx.upstream(STAGE_SYNTHGEN) / "gt_cloud.ply"))
    report = evaluate_cloud(
        cloud,
        scene,
        gt_cloud,
        ctx.config.evaluation(),
        config_hash=ctx.config.section_hash(*SECTION_SCHEMAS),
    ).to_dict()
    out = ctx.directory
    write_json(out / "metrics.json", report)
    write_report_csv(out / "metrics.csv", report)
    return StageOutput(
        inputs=[ctx.upstream(STAGE_EXTRACT) / "cloud.ply", ctx.upstream(STAGE_SYNTHGEN) / "gt_cloud.ply"],
        outputs=[out / "metrics.json", out / "metrics.csv"],
        metrics={
            "mean_iou": report["semantic"]["macro"]["iou"],
            "mWCov": report["instance"]["mWCov"],
            "completeness": report["completeness"]["value"],
        },
    )


def run_cluster_baseline(ctx: StageContext) -> StageOutput:
    """Replace matched instances with per-class DBSCAN clusters and compare."""
    cloud = _read_cloud(ctx)
    if len(cloud) < 2:  # noqa: PLR2004
        msg = "Clustering needs an extracted cloud with at least two points"
        raise InvalidInputError(msg)
    scene = load_scene(ctx.root)
    section = ctx.config.section("clustering")
    _, gt_instance = transfer_labels(cloud.positions, scene)
    scale = mean_neighbor_distance(cloud.positions)
    grid = [
        DBSCANParams(eps=factor * scale, min_pts=min_pts)
        for factor in section["eps_multipliers"]
        for min_pts in section["min_pts"]
    ]
    tuned = tune_dbscan(cloud.positions, cloud.semantic, gt_instance, grid, ctx.config.workers)
    matched = instance_metrics(cloud.instance, gt_instance)
    baseline = instance_metrics(tuned.instances, gt_instance)
    out = ctx.directory
    write_ply(
        out / "cloud.ply",
        LabeledPointCloud(cloud.positions, cloud.colors, cloud.semantic, tuned.instances),
    )
    write_sweep_csv(out / "sweep.csv", tuned.sweep)
    report = {
        "params": {"eps": tuned.params.eps, "min_pts": tuned.params.min_pts},
        "baseline": baseline.to_dict(),
        "matched": matched.to_dict(),
    }
    write_json(out / "metrics.json", report)
    _LOGGER.info("mWCov with matching %.4f, DBSCAN baseline %.4f", matched.m_wcov, baseline.m_wcov)
    return StageOutput(
        inputs=[ctx.upstream(STAGE_EXTRACT) / "cloud.ply"],
        outputs=[out / "cloud.ply", out / "sweep.csv", out / "metrics.json"],
        metrics={"mWCov_matched": matched.m_wcov, "mWCov_baseline": baseline.m_wcov},
    )


STAGE_DESCRIPTIONS: tuple[StageDescription, ...] = (
    StageDescription(
        key=STAGE_SYNTHGEN,
        index=0,
        sections=("scene", "capture"),
        run_fn=run_synthgen,
    ),
    StageDescription(
        key=STAGE_CORRUPT,
        index=1,
        requires=(STAGE_SYNTHGEN,),
        sections=("corruption",),
        run_fn=run_corrupt,
    ),
    StageDescription(
        key=STAGE_MATCH,
        index=2,
        requires=(STAGE_SYNTHGEN, STAGE_CORRUPT),
        sections=("matching",),
        run_fn=run_match,
    ),
    StageDescription(
        key=STAGE_TRAIN,
        index=3,
        requires=(STAGE_SYNTHGEN, STAGE_MATCH),
        sections=("field", "training"),
        run_fn=run_train,
    ),
    StageDescription(
        key=STAGE_EXTRACT,
        index=4,
        requires=(STAGE_SYNTHGEN, STAGE_TRAIN),
        sections=("field", "extraction"),
        run_fn=run_extract,
    ),
    StageDescription(
        key=STAGE_EVAL,
        index=5,
        requires=(STAGE_SYNTHGEN, STAGE_TRAIN, STAGE_EXTRACT),
        sections=("evaluation",),
        run_fn=run_eval,
    ),
    StageDescription(
        key=STAGE_CLUSTER,
        index=6,
        requires=(STAGE_SYNTHGEN, STAGE_TRAIN, STAGE_EXTRACT),
        sections=("clustering",),
        run_fn=run_cluster_baseline,
        enabled_fn=lambda config: config.section("clustering")["enabled"],
    ),
)

STAGES: dict[str, StageDescription] = {stage.key: stage for stage in STAGE_DESCRIPTIONS}
