"""Exception hierarchy shared by every module.

Each family carries the process exit code the CLI reports for it.
"""

from __future__ import annotations


class AbraError(Exception):
    exit_code = 1


class ConfigError(AbraError, ValueError):
    """Bad configuration, precondition violation or incompatible inputs."""

    exit_code = 2


class DimensionError(ConfigError):
    pass


class CheckpointIncompatibleError(ConfigError):
    pass


class CompositionError(ConfigError):
    pass


class ArtifactIOError(AbraError, OSError):
    exit_code = 3


class FormatError(ArtifactIOError):
    pass


class CorruptionError(ArtifactIOError):
    pass


class VersionError(ArtifactIOError):
    pass


class ValidationError(ArtifactIOError):
    pass


class SerializationError(ArtifactIOError):
    pass


class NumericError(AbraError, ArithmeticError):
    exit_code = 4


class TrainingFailure(NumericError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class LeakageError(AbraError):
    exit_code = 5


class DegenerateAlignmentWarning(UserWarning):
    """Procrustes cross-product is rank deficient, so the minimiser is not unique."""
