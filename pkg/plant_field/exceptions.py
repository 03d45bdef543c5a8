"""Exceptions for plant_field."""

from __future__ import annotations


class PlantFieldError(Exception):
    """Base error for the package."""


class ConfigError(PlantFieldError, ValueError):
    """Configuration file is missing or invalid."""


class InvalidCameraError(PlantFieldError, ValueError):
    """Camera intrinsics, pose or pixel query is invalid."""


class InvalidInputError(PlantFieldError, ValueError):
    """An operation received input outside its domain."""


class SceneError(PlantFieldError):
    """A synthetic scene could not be built."""


class CodebookError(PlantFieldError, ValueError):
    """A label codebook could not be allocated or queried."""


class TrainingError(PlantFieldError):
    """Training diverged."""

    def __init__(self, iteration: int, param_norm: float, message: str) -> None:
        """Initialize the error with diagnostics."""
        super().__init__(f"{message} at iteration {iteration} (|params|={param_norm:.4g})")
        self.iteration = iteration
        self.param_norm = param_norm


class ManifestError(PlantFieldError):
    """Pipeline manifest is inconsistent with the files on disk."""


class StageError(PlantFieldError):
    """A pipeline stage failed."""

    def __init__(self, stage: str, diagnostics: str) -> None:
        """Initialize the error with the failing stage name."""
        super().__init__(f"Stage {stage} failed: {diagnostics}")
        self.stage = stage
        self.diagnostics = diagnostics
