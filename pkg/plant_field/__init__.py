"""Plant organ instance segmentation through a jointly trained radiance field.

Synthetic plants are rendered from a camera ring, their per-view instance
labels are corrupted and re-unified by multi-view instance matching, and a
hash-grid field learns color, class and instance codewords together. The
trained field is converted to a labeled point cloud and scored.
"""

from __future__ import annotations

from .config import PipelineConfig
from .coordinator import PipelineCoordinator
from .exceptions import PlantFieldError

__all__ = ["PipelineConfig", "PipelineCoordinator", "PlantFieldError"]
