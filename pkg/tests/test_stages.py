"""Tests for the pipeline stages on a small capture."""

from __future__ import annotations

import json
from typing import TYPE_CHECKING

import pytest

from plant_field.config import PipelineConfig
from plant_field.coordinator import PipelineCoordinator
from plant_field.exceptions import StageError
from plant_field.stages import load_cameras, load_scene, load_views

if TYPE_CHECKING:
    from pathlib import Path

SMALL_RUN = {
    "name": "small",
    "seed": 11,
    "scene": {"organs": {"stem": 1, "leaf": 2}, "gt_points": 300},
    "capture": {"views": 4, "width": 32, "height": 24},
}

TINY_TRAINING = {
    "field": {"levels": 4, "log2_table": 10, "min_resolution": 4, "max_resolution": 32, "hidden_width": 16},
    "training": {
        "rays_per_iter": 64,
        "iterations": 4,
        "n_coarse": 8,
        "n_fine": 8,
        "holdout_every": 3,
        "log_every": 2,
    },
    "extraction": {"resolution": 16, "sigma_threshold": 1.0},
}


def _coordinator(root: Path, raw: dict | None = None) -> PipelineCoordinator:
    """Create a coordinator over the small capture."""
    return PipelineCoordinator(PipelineConfig.from_dict(raw or SMALL_RUN), root)


def test_synthgen_writes_capture(tmp_path: Path) -> None:
    """Test synthgen writes the scene, cameras, views and ground-truth cloud."""
    entry = _coordinator(tmp_path).run_stage("synthgen")

    scene = load_scene(tmp_path)
    cameras = load_cameras(tmp_path)
    views = load_views(tmp_path / "synthgen" / "views", len(cameras))
    assert len(scene.primitives) == 3
    assert len(cameras) == 4
    assert views[0].instance.shape == (24, 32)
    assert "synthgen/gt_cloud.ply" in entry.outputs
    assert entry.metrics["views"] == 4
    assert 0.0 < entry.metrics["foreground_fraction"] < 1.0


def test_corrupt_and_match(tmp_path: Path) -> None:
    """Test corruption and matching run from upstream outputs and report consistency."""
    coordinator = _coordinator(tmp_path)
    for key in ("synthgen", "corrupt", "match"):
        coordinator.run_stage(key)

    record = json.loads((tmp_path / "match" / "matching.json").read_text())
    metrics = coordinator.manifest.stages["match"].metrics
    assert 0.0 <= metrics["label_consistency"] <= 1.0
    assert metrics["global_ids"] >= 1
    assert record["stats"]["iterations"] == metrics["iterations"]
    assert (tmp_path / "corrupt" / "corruption_log.json").exists()


def test_stage_outputs_are_reproducible(tmp_path: Path) -> None:
    """Test the same config and seed write byte-identical outputs."""
    digests = []
    for name in ("first", "second"):
        coordinator = _coordinator(tmp_path / name)
        for key in ("synthgen", "corrupt"):
            coordinator.run_stage(key)
        digests.append({key: entry.outputs for key, entry in coordinator.manifest.stages.items()})

    assert digests[0] == digests[1]


def test_seed_changes_outputs(tmp_path: Path) -> None:
    """Test a different seed builds a different scene."""
    first = _coordinator(tmp_path / "a").run_stage("synthgen")
    second = _coordinator(tmp_path / "b", {**SMALL_RUN, "seed": 12}).run_stage("synthgen")

    assert first.outputs["synthgen/scene.json"] != second.outputs["synthgen/scene.json"]


def test_eval_without_extract_fails(tmp_path: Path) -> None:
    """Test a downstream stage refuses to run on missing upstream outputs."""
    coordinator = _coordinator(tmp_path)
    coordinator.run_stage("synthgen")

    with pytest.raises(StageError, match="missing upstream output"):
        coordinator.run_stage("eval")


@pytest.mark.slow
def test_full_pipeline(tmp_path: Path) -> None:
    """Test every stage runs end to end and writes the metric report."""
    coordinator = _coordinator(tmp_path, {**SMALL_RUN, **TINY_TRAINING})

    manifest = coordinator.run_pipeline()

    assert list(manifest.stages) == ["synthgen", "corrupt", "match", "train", "extract", "eval"]
    report = json.loads((tmp_path / "eval" / "metrics.json").read_text())
    assert {"semantic", "instance", "completeness"} <= set(report)
    assert 0.0 <= report["instance"]["mWCov"] <= 1.0
    assert (tmp_path / "train" / "trace.csv").read_text().startswith("iteration")
