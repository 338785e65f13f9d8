"""Fiber-bundle segmentation for large 2D histological sections.

Pipeline: manifest-driven slide I/O, stratified patch sampling, a
configurable 2D U-Net trained with cross-validation (optionally initialized
by reconstruction pre-training), ensembled sliding-window inference, and
bundle-level evaluation metrics. A synthetic section generator provides
known ground truth for end-to-end checks.
"""

from .errors import (
    CheckpointError,
    ManifestError,
    ShapeMismatchError,
    TrainingDivergedError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ManifestError",
    "ShapeMismatchError",
    "TrainingDivergedError",
    "ValidationError",
    "__version__",
]
