"""Typed errors shared across the package.

Every error carries a short machine-readable ``kind`` so the CLI can emit
one-line ``error=<kind> detail=<text>`` diagnostics without string matching.
"""


class RoverSegError(Exception):
    kind = "internal"


class ShapeError(RoverSegError):
    kind = "shape"


class DomainError(RoverSegError):
    """Numeric-domain violation: log of non-positive values, overflow, NaN."""

    kind = "domain"


class ResolutionError(RoverSegError):
    kind = "resolution"


class DegenerateInputError(RoverSegError):
    """Input that is structurally valid but meaningless (zero vectors, empty batch)."""

    kind = "degenerate_input"


class ConfigError(RoverSegError):
    kind = "config"


class CheckpointError(RoverSegError):
    kind = "checkpoint"


class CheckpointFormatError(CheckpointError):
    kind = "checkpoint_format"


class CheckpointVersionError(CheckpointError):
    kind = "checkpoint_version"


class CheckpointCorruptError(CheckpointError):
    kind = "checkpoint_corrupt"


class StructureMismatchError(CheckpointError):
    kind = "structure_mismatch"


class TrainingDivergence(RoverSegError):
    """Raised when a loss or gradient stops being finite.

    Carries the epoch/batch indices so the trainer's caller can report where
    the run went bad.
    """

    kind = "divergence"

    def __init__(self, msg, epoch=None, batch=None):
        super().__init__(msg)
        self.epoch = epoch
        self.batch = batch


class DataError(RoverSegError):
    kind = "data"
