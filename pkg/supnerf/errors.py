"""Exception hierarchy for supnerf."""

from __future__ import annotations


class SupNerfError(Exception):
    """Base class for every error raised deliberately by supnerf."""


class InvalidArgumentError(SupNerfError, ValueError):
    """An input violates a documented precondition."""


class ShapeError(SupNerfError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class BehindCameraError(SupNerfError):
    """A point or object lies at or behind the camera plane."""


class NonFiniteError(SupNerfError, FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by '{op}'")
        self.op = op


class DeterminismError(SupNerfError):
    """Two forward passes of the same function disagreed."""


class ConfigError(SupNerfError):
    """Configuration could not be read or contains unknown keys."""


class TensorFileError(SupNerfError):
    """A SUPT tensor file is malformed."""


class ManifestError(SupNerfError):
    """A dataset manifest cannot be read or fails validation."""


class RecordError(SupNerfError):
    """One dataset record failed to load or process."""

    def __init__(self, object_id: int, view_id: int, reason: str):
        super().__init__(f"record {object_id}_{view_id}: {reason}")
        self.object_id = object_id
        self.view_id = view_id
        self.reason = reason


class TrainingDivergedError(SupNerfError):
    """A training loss term became non-finite."""

    def __init__(self, term: str, detail: str = ""):
        message = f"training diverged: loss term '{term}' is not finite"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.term = term


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(SupNerfError):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    """Bad magic or truncated checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class MissingTensorError(CheckpointError):
    """The model expects a tensor the checkpoint does not contain."""


class UnknownTensorError(CheckpointError):
    """The checkpoint contains a tensor the model does not declare."""


class ConfigMismatchError(CheckpointError):
    """The checkpoint's config echo disagrees with the current run config."""

    def __init__(self, fields: list[str]):
        super().__init__(f"checkpoint config mismatch in: {', '.join(fields)}")
        self.fields = fields
