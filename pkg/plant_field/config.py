"""Pipeline configuration: one JSON file, one section per stage."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import voluptuous as vol
from slugify import slugify

from .const import (
    _LOGGER,
    CAMERA_FILTER_FRACTION,
    CLASS_BY_NAME,
    COMPLETENESS_EPS,
    DEPTH_TOLERANCE_FRACTION,
    GRID_RESOLUTION,
    HASH_FEATURES,
    HASH_LEVELS,
    HASH_LOG2_TABLE,
    HASH_LR,
    HASH_MAX_RESOLUTION,
    HASH_MIN_RESOLUTION,
    HIDDEN_WIDTH,
    HOLDOUT_EVERY,
    INSTANCE_IOU_THRESHOLD,
    MAX_IM_ITERATIONS,
    MAX_POINTS,
    MIN_INVERSE_SUPPORT,
    MLP_LR,
    N_COARSE,
    N_FINE,
    PDF_FLOOR,
    RAYS_PER_ITER,
    SAMPLE_MIN,
    SAMPLE_STEP_CAP,
    SAMPLE_TARGET,
    SH_DEGREE,
    SIGMA_THRESHOLD,
    T_FAR,
    T_NEAR,
    TRAIN_ITERATIONS,
    UNASSIGNED_THRESHOLD,
)
from .corruption import CorruptionConfig, ErrorPattern
from .evaluation import EvaluationConfig
from .exceptions import ConfigError
from .extraction import ExtractionConfig
from .field import FieldConfig
from .matching import MatchingConfig
from .renderer import TrainingConfig

if TYPE_CHECKING:
    from pathlib import Path

CONF_NAME = "name"
CONF_SEED = "seed"
CONF_WORKERS = "workers"

SCENE_KINDS = ("plant", "touching_leaves")
PATTERNS = [str(p) for p in ErrorPattern]

Positive = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))
PositiveInt = vol.All(vol.Coerce(int), vol.Range(min=1))
NonNegativeInt = vol.All(vol.Coerce(int), vol.Range(min=0))
Fraction = vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))
Point3 = vol.All([vol.Coerce(float)], vol.Length(min=3, max=3))

SCENE_SCHEMA = vol.Schema(
    {
        vol.Optional("kind", default="plant"): vol.In(SCENE_KINDS),
        vol.Optional(
            "organs", default={"stem": 1, "leaf": 2, "fruit": 1, "flower": 1}
        ): {vol.In(list(CLASS_BY_NAME)): NonNegativeInt},
        vol.Optional("bounds", default=[[-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]]): vol.All(
            [Point3], vol.Length(min=2, max=2)
        ),
        vol.Optional("gt_points", default=100_000): PositiveInt,
    }
)

CAPTURE_SCHEMA = vol.Schema(
    {
        vol.Optional("views", default=30): vol.All(vol.Coerce(int), vol.Range(min=2)),
        vol.Optional("width", default=160): PositiveInt,
        vol.Optional("height", default=120): PositiveInt,
        vol.Optional("fov_degrees", default=50.0): vol.All(
            vol.Coerce(float), vol.Range(min=1.0, max=170.0)
        ),
        vol.Optional("radius", default=2.0): Positive,
        vol.Optional("elevations", default=[30.0]): vol.All(
            [vol.Coerce(float)], vol.Length(min=1)
        ),
    }
)

CORRUPTION_SCHEMA = vol.Schema(
    {
        vol.Optional("rates", default={"b": 0.1, "c": 0.1}): {vol.In(PATTERNS): Fraction},
        vol.Optional("counts", default={"a": 1, "f": 1}): {vol.In(PATTERNS): NonNegativeInt},
    }
)

MATCHING_SCHEMA = vol.Schema(
    {
        vol.Optional("sample_target", default=SAMPLE_TARGET): PositiveInt,
        vol.Optional("step_cap", default=SAMPLE_STEP_CAP): PositiveInt,
        vol.Optional("sample_min", default=SAMPLE_MIN): PositiveInt,
        vol.Optional("depth_tolerance_fraction", default=DEPTH_TOLERANCE_FRACTION): Positive,
        vol.Optional("max_iterations", default=MAX_IM_ITERATIONS): PositiveInt,
        vol.Optional("unassigned_threshold", default=UNASSIGNED_THRESHOLD): NonNegativeInt,
        vol.Optional("min_inverse_support", default=MIN_INVERSE_SUPPORT): Fraction,
        vol.Optional("orphan_sweep", default=True): bool,
    }
)

FIELD_SCHEMA = vol.Schema(
    {
        vol.Optional("levels", default=HASH_LEVELS): PositiveInt,
        vol.Optional("features", default=HASH_FEATURES): PositiveInt,
        vol.Optional("log2_table", default=HASH_LOG2_TABLE): vol.All(
            vol.Coerce(int), vol.Range(min=4, max=24)
        ),
        vol.Optional("min_resolution", default=HASH_MIN_RESOLUTION): PositiveInt,
        vol.Optional("max_resolution", default=HASH_MAX_RESOLUTION): PositiveInt,
        vol.Optional("sh_degree", default=SH_DEGREE): vol.All(
            vol.Coerce(int), vol.Range(min=0, max=3)
        ),
        vol.Optional("hidden_width", default=HIDDEN_WIDTH): PositiveInt,
        vol.Optional("hash_lr", default=HASH_LR): Positive,
        vol.Optional("mlp_lr", default=MLP_LR): Positive,
        vol.Optional("dtype", default="float32"): vol.In(("float32", "float64")),
    }
)

TRAINING_SCHEMA = vol.Schema(
    {
        vol.Optional("rays_per_iter", default=RAYS_PER_ITER): PositiveInt,
        vol.Optional("iterations", default=TRAIN_ITERATIONS): NonNegativeInt,
        vol.Optional("n_coarse", default=N_COARSE): vol.All(vol.Coerce(int), vol.Range(min=2)),
        vol.Optional("n_fine", default=N_FINE): NonNegativeInt,
        vol.Optional("pdf_floor", default=PDF_FLOOR): Fraction,
        vol.Optional("holdout_every", default=HOLDOUT_EVERY): NonNegativeInt,
        vol.Optional("foreground_bias", default=0.0): Fraction,
        vol.Optional("t_near", default=T_NEAR): Positive,
        vol.Optional("t_far", default=T_FAR): Positive,
        vol.Optional("chunk", default=4096): PositiveInt,
        vol.Optional("log_every", default=100): PositiveInt,
    }
)

EXTRACTION_SCHEMA = vol.Schema(
    {
        vol.Optional("resolution", default=GRID_RESOLUTION): vol.All(
            vol.Coerce(int), vol.Range(min=8)
        ),
        vol.Optional("sigma_threshold", default=SIGMA_THRESHOLD): Positive,
        vol.Optional("max_points", default=MAX_POINTS): vol.All(
            vol.Coerce(int), vol.Range(min=1, max=MAX_POINTS)
        ),
        vol.Optional("camera_filter_fraction", default=CAMERA_FILTER_FRACTION): Fraction,
    }
)

EVALUATION_SCHEMA = vol.Schema(
    {
        vol.Optional("completeness_eps", default=COMPLETENESS_EPS): Positive,
        vol.Optional("normalize_diagonal", default=True): bool,
        vol.Optional("iou_threshold", default=INSTANCE_IOU_THRESHOLD): Fraction,
    }
)

CLUSTERING_SCHEMA = vol.Schema(
    {
        vol.Optional("enabled", default=False): bool,
        vol.Optional("eps_multipliers", default=[0.5, 1.0, 2.0, 4.0]): vol.All(
            [Positive], vol.Length(min=1)
        ),
        vol.Optional("min_pts", default=[4, 8, 16]): vol.All([PositiveInt], vol.Length(min=1)),
    }
)

SECTION_SCHEMAS: dict[str, vol.Schema] = {
    "scene": SCENE_SCHEMA,
    "capture": CAPTURE_SCHEMA,
    "corruption": CORRUPTION_SCHEMA,
    "matching": MATCHING_SCHEMA,
    "field": FIELD_SCHEMA,
    "training": TRAINING_SCHEMA,
    "extraction": EXTRACTION_SCHEMA,
    "evaluation": EVALUATION_SCHEMA,
    "clustering": CLUSTERING_SCHEMA,
}

CONFIG_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_NAME, default="reference"): vol.All(str, vol.Length(min=1)),
        vol.Optional(CONF_SEED, default=0): NonNegativeInt,
        vol.Optional(CONF_WORKERS, default=1): PositiveInt,
        **{
            vol.Optional(section, default={}): schema
            for section, schema in SECTION_SCHEMAS.items()
        },
    }
)


def canonical_hash(payload: Any) -> str:
    """Return the SHA-256 of canonical JSON."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def stage_seed(seed: int, stage_index: int) -> int:
    """Return the per-stage seed."""
    return seed ^ stage_index


@dataclass(frozen=True)
class PipelineConfig:
    """A validated configuration with typed per-stage views."""

    data: dict[str, Any]

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> PipelineConfig:
        """Validate a raw record, filling defaults."""
        try:
            data = CONFIG_SCHEMA(raw)
        except vol.Invalid as err:
            msg = f"Invalid configuration: {err}"
            raise ConfigError(msg) from err
        bounds = data["scene"]["bounds"]
        if any(lo >= hi for lo, hi in zip(*bounds, strict=True)):
            msg = f"Scene bounds must satisfy min < max, got {bounds}"
            raise ConfigError(msg)
        training = data["training"]
        if training["t_near"] >= training["t_far"]:
            msg = "training.t_near must be below training.t_far"
            raise ConfigError(msg)
        return cls(data=data)

    @classmethod
    def load(cls, path: Path | None) -> PipelineConfig:
        """Read and validate a config file; None gives the defaults."""
        if path is None:
            return cls.from_dict({})
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            msg = f"Cannot read config {path}: {err}"
            raise ConfigError(msg) from err
        if not isinstance(raw, dict):
            msg = f"Config {path} must hold a JSON object"
            raise ConfigError(msg)
        _LOGGER.debug("Loaded config %s", path)
        return cls.from_dict(raw)

    def with_overrides(
        self, seed: int | None = None, workers: int | None = None
    ) -> PipelineConfig:
        """Return a copy with command-line overrides applied."""
        data = json.loads(json.dumps(self.data))
        if seed is not None:
            data[CONF_SEED] = seed
        if workers is not None:
            data[CONF_WORKERS] = workers
        return PipelineConfig.from_dict(data)

    @property
    def name(self) -> str:
        """Return the experiment name."""
        return self.data[CONF_NAME]

    @property
    def slug(self) -> str:
        """Return the name as a directory-safe slug."""
        return slugify(self.name) or "run"

    @property
    def seed(self) -> int:
        """Return the global seed."""
        return self.data[CONF_SEED]

    @property
    def workers(self) -> int:
        """Return the worker count."""
        return self.data[CONF_WORKERS]

    def section(self, name: str) -> dict[str, Any]:
        """Return one validated section."""
        return self.data[name]

    def section_hash(self, *names: str) -> str:
        """Return the hash of the named sections plus the global seed."""
        return canonical_hash(
            {CONF_SEED: self.seed, **{name: self.data[name] for name in names}}
        )

    def corruption(self) -> CorruptionConfig:
        """Return the corruption settings."""
        section = self.data["corruption"]
        return CorruptionConfig(rates=dict(section["rates"]), counts=dict(section["counts"]))

    def matching(self) -> MatchingConfig:
        """Return the matching settings."""
        return MatchingConfig(**self.data["matching"], workers=self.workers)

    def field(self) -> FieldConfig:
        """Return the field architecture."""
        return FieldConfig(**self.data["field"])

    def training(self, seed: int) -> TrainingConfig:
        """Return the training settings."""
        return TrainingConfig(**self.data["training"], seed=seed)

    def extraction(self, seed: int) -> ExtractionConfig:
        """Return the extraction settings."""
        return ExtractionConfig(**self.data["extraction"], seed=seed)

    def evaluation(self) -> EvaluationConfig:
        """Return the evaluation settings."""
        return EvaluationConfig(**self.data["evaluation"])
