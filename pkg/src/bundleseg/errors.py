"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data, file, or configuration violates a documented contract."""


class ManifestError(ValidationError):
    """Dataset manifest is missing, malformed, or inconsistent."""


class ShapeMismatchError(ValidationError):
    """Array shapes are incompatible with the requested operation."""


class CheckpointError(ValidationError):
    """Checkpoint file is unreadable or incompatible with the target config."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""
