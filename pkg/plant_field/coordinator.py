"""Run pipeline stages in order and keep the manifest current."""

from __future__ import annotations

import time
from typing import TYPE_CHECKING

import torch

from .const import _LOGGER
from .exceptions import ManifestError, PlantFieldError, StageError
from .manifest import PipelineManifest
from .stages import STAGE_DESCRIPTIONS, STAGES, StageContext

if TYPE_CHECKING:
    from pathlib import Path

    from .config import PipelineConfig
    from .manifest import StageRecord


class PipelineCoordinator:
    """Execute stages against one run directory."""

    def __init__(self, config: PipelineConfig, root: Path) -> None:
        """Initialize the coordinator."""
        self.config = config
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = PipelineManifest.read(root, verify=False)
        self._last_stage_success = True

    def run_stage(self, key: str) -> StageRecord:
        """Run one stage from the outputs of earlier stages."""
        if key not in STAGES:
            msg = f"Unknown stage {key}"
            raise StageError(key, msg)
        description = STAGES[key]
        torch.set_num_threads(self.config.workers)
        context = StageContext(
            config=self.config, root=self.root, index=description.index, key=key
        )
        _LOGGER.info("Running stage %s (seed %s)", key, context.seed)
        started = time.perf_counter()
        try:
            self.manifest.verify(description.requires)
            output = description.run_fn(context)
            entry = self.manifest.record(
                key,
                seed=context.seed,
                config_hash=self.config.section_hash(*description.sections),
                inputs=output.inputs,
                outputs=output.outputs,
                seconds=time.perf_counter() - started,
                metrics=output.metrics,
            )
            self.manifest.write()
        except ManifestError as exception:
            self._failed(key, exception)
            raise StageError(key, f"missing upstream output: {exception}") from exception
        except PlantFieldError as exception:
            self._failed(key, exception)
            raise StageError(key, str(exception)) from exception
        except OSError as exception:
            self._failed(key, exception)
            raise StageError(key, f"I/O error: {exception}") from exception

        if not self._last_stage_success:
            _LOGGER.info("Pipeline recovered at stage %s", key)
        self._last_stage_success = True
        _LOGGER.info("Stage %s finished in %.1f s", key, entry.seconds)
        return entry

    def _failed(self, key: str, exception: Exception) -> None:
        if self._last_stage_success:
            _LOGGER.warning("Stage %s failed: %s", key, exception)
        self._last_stage_success = False

    def stage_keys(self) -> list[str]:
        """Return the enabled stages in execution order."""
        return [s.key for s in STAGE_DESCRIPTIONS if s.enabled_fn(self.config)]

    def run_pipeline(self) -> PipelineManifest:
        """Run every enabled stage; the first failure halts the run."""
        for key in self.stage_keys():
            self.run_stage(key)
        _LOGGER.info("Pipeline %s complete in %s", self.config.name, self.root)
        return self.manifest
