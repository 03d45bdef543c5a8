"""Tests for the pipeline coordinator."""

from __future__ import annotations

import json
import logging
from typing import TYPE_CHECKING
from unittest.mock import MagicMock, patch

import pytest

from plant_field.config import PipelineConfig, stage_seed
from plant_field.coordinator import PipelineCoordinator
from plant_field.data import as_bounds
from plant_field.exceptions import InvalidInputError, StageError
from plant_field.manifest import MANIFEST_NAME
from plant_field.stages import STAGES, StageDescription, StageOutput

if TYPE_CHECKING:
    from pathlib import Path

    from plant_field.stages import StageContext


def _write_stage(context: StageContext) -> StageOutput:
    """Write one file into the stage directory."""
    path = context.directory / "out.json"
    path.write_text(json.dumps({"seed": context.seed}))
    return StageOutput(outputs=[path], metrics={"seed": context.seed})


def _read_stage(context: StageContext) -> StageOutput:
    """Read the first stage's file and copy it."""
    source = context.upstream("first") / "out.json"
    target = context.directory / "copy.json"
    target.write_text(source.read_text())
    return StageOutput(inputs=[source], outputs=[target])


def _fake_stages(failing: MagicMock | None = None) -> dict[str, StageDescription]:
    """Return a two-stage pipeline, optionally with a failing third stage."""
    stages = {
        "first": StageDescription(key="first", index=0, sections=("scene",), run_fn=_write_stage),
        "second": StageDescription(
            key="second", index=1, requires=("first",), run_fn=_read_stage
        ),
    }
    if failing is not None:
        stages["broken"] = StageDescription(
            key="broken", index=2, requires=("first",), run_fn=failing
        )
    return stages


def _make_coordinator(root: Path, seed: int = 5) -> PipelineCoordinator:
    """Create a coordinator over a default config."""
    return PipelineCoordinator(PipelineConfig.from_dict({"seed": seed}), root)


def test_run_stage_records_manifest(tmp_path: Path) -> None:
    """Test a stage run is hashed into the manifest with its stage seed."""
    coordinator = _make_coordinator(tmp_path)

    with patch.dict(STAGES, _fake_stages(), clear=True):
        entry = coordinator.run_stage("first")
        coordinator.run_stage("second")

    assert entry.seed == stage_seed(5, 0)
    assert entry.metrics == {"seed": 5}
    assert entry.config_hash == coordinator.config.section_hash("scene")
    record = json.loads((tmp_path / MANIFEST_NAME).read_text())
    assert [stage["name"] for stage in record["stages"]] == ["first", "second"]
    assert record["stages"][1]["inputs"] == ["first/out.json"]
    assert record["stages"][1]["seed"] == stage_seed(5, 1)


def test_unknown_stage_raises(tmp_path: Path) -> None:
    """Test an unknown key is a stage error."""
    coordinator = _make_coordinator(tmp_path)

    with pytest.raises(StageError, match="Unknown stage"):
        coordinator.run_stage("nope")


def test_missing_upstream_raises(tmp_path: Path) -> None:
    """Test running a stage before its upstream fails without touching the manifest."""
    coordinator = _make_coordinator(tmp_path)

    with (
        patch.dict(STAGES, _fake_stages(), clear=True),
        pytest.raises(StageError, match="missing upstream output"),
    ):
        coordinator.run_stage("second")

    assert not (tmp_path / MANIFEST_NAME).exists()


def test_tampered_upstream_raises(tmp_path: Path) -> None:
    """Test an upstream file edited after its stage ran is rejected."""
    coordinator = _make_coordinator(tmp_path)

    with patch.dict(STAGES, _fake_stages(), clear=True):
        coordinator.run_stage("first")
        (tmp_path / "first" / "out.json").write_text("{}")
        with pytest.raises(StageError, match="changed"):
            coordinator.run_stage("second")


def test_manifest_survives_a_new_coordinator(tmp_path: Path) -> None:
    """Test a later process resumes from the written manifest."""
    with patch.dict(STAGES, _fake_stages(), clear=True):
        _make_coordinator(tmp_path).run_stage("first")
        entry = _make_coordinator(tmp_path).run_stage("second")

    assert entry.inputs == ["first/out.json"]


def test_failure_warns_once_and_recovers(
    tmp_path: Path, caplog: pytest.LogCaptureFixture
) -> None:
    """Test repeated failures warn once and a later success logs recovery."""
    failing = MagicMock(side_effect=InvalidInputError("boom"))
    coordinator = _make_coordinator(tmp_path)

    with patch.dict(STAGES, _fake_stages(failing), clear=True):
        coordinator.run_stage("first")
        with caplog.at_level(logging.WARNING):
            with pytest.raises(StageError, match="boom"):
                coordinator.run_stage("broken")
            with pytest.raises(StageError):
                coordinator.run_stage("broken")

        assert caplog.text.count("Stage broken failed") == 1

        caplog.clear()
        with caplog.at_level(logging.INFO):
            coordinator.run_stage("second")

    assert "Pipeline recovered at stage second" in caplog.text
    assert "broken" not in coordinator.manifest.stages


def test_stage_error_carries_stage_name(tmp_path: Path) -> None:
    """Test the raised error names the failing stage."""
    failing = MagicMock(side_effect=InvalidInputError("bad mask"))
    coordinator = _make_coordinator(tmp_path)

    with patch.dict(STAGES, _fake_stages(failing), clear=True):
        coordinator.run_stage("first")
        with pytest.raises(StageError) as excinfo:
            coordinator.run_stage("broken")

    assert excinfo.value.stage == "broken"
    assert "bad mask" in str(excinfo.value)


def test_default_stage_keys(tmp_path: Path) -> None:
    """Test the clustering baseline only runs when enabled."""
    default = _make_coordinator(tmp_path)
    enabled = PipelineCoordinator(
        PipelineConfig.from_dict({"clustering": {"enabled": True}}), tmp_path
    )

    assert default.stage_keys() == ["synthgen", "corrupt", "match", "train", "extract", "eval"]
    assert enabled.stage_keys()[-1] == "cluster-baseline"


def test_run_pipeline_runs_in_order(tmp_path: Path) -> None:
    """Test the pipeline runs every enabled stage and returns the manifest."""
    stages = _fake_stages()
    coordinator = _make_coordinator(tmp_path)

    with (
        patch.dict(STAGES, stages, clear=True),
        patch("plant_field.coordinator.STAGE_DESCRIPTIONS", tuple(stages.values())),
    ):
        manifest = coordinator.run_pipeline()

    assert list(manifest.stages) == ["first", "second"]


def test_run_pipeline_halts_on_failure(tmp_path: Path) -> None:
    """Test the first failing stage stops the run."""
    failing = MagicMock(side_effect=InvalidInputError("boom"))
    stages = _fake_stages(failing)
    ordered = (stages["first"], stages["broken"], stages["second"])
    coordinator = _make_coordinator(tmp_path)

    with (
        patch.dict(STAGES, stages, clear=True),
        patch("plant_field.coordinator.STAGE_DESCRIPTIONS", ordered),
        pytest.raises(StageError),
    ):
        coordinator.run_pipeline()

    assert list(coordinator.manifest.stages) == ["first"]


def test_io_failure_becomes_stage_error(
    tmp_path: Path, caplog: pytest.LogCaptureFixture
) -> None:
    """Test an OSError inside a stage is wrapped and warned about once."""
    failing = MagicMock(side_effect=OSError("disk full"))
    coordinator = _make_coordinator(tmp_path)

    with patch.dict(STAGES, _fake_stages(failing), clear=True):
        coordinator.run_stage("first")
        with caplog.at_level(logging.WARNING):
            with pytest.raises(StageError, match="disk full") as excinfo:
                coordinator.run_stage("broken")
            with pytest.raises(StageError):
                coordinator.run_stage("broken")

    assert excinfo.value.stage == "broken"
    assert isinstance(excinfo.value.__cause__, OSError)
    assert caplog.text.count("Stage broken failed") == 1


def test_invalid_input_inside_stage_becomes_stage_error(tmp_path: Path) -> None:
    """Test invalid values raised by library code surface as a stage error."""
    coordinator = _make_coordinator(tmp_path)

    def _bad_bounds(_context: StageContext) -> StageOutput:
        as_bounds([0.0, 0.0, 0.0], [1.0, 0.0, 1.0])
        return StageOutput()

    stages = {"first": StageDescription(key="first", index=0, run_fn=_bad_bounds)}
    with patch.dict(STAGES, stages, clear=True), pytest.raises(StageError, match="Degenerate"):
        coordinator.run_stage("first")
