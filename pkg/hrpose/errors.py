"""
Exception hierarchy for hrpose.

All errors raised deliberately by the package derive from HRPoseError so the
command-line surface can turn them into a logged message and exit code 1.
"""

from typing import Any, List, Optional


class HRPoseError(Exception):
    """Base class for all hrpose errors."""


class ShapeError(HRPoseError, ValueError):
    """A tensor or array has the wrong shape along a named dimension."""

    def __init__(
        self,
        message: str,
        dimension: Optional[str] = None,
        expected: Any = None,
        actual: Any = None
    ):
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        if dimension is not None:
            message = f"{message} (dimension {dimension}: expected {expected}, got {actual})"
        super().__init__(message)


class DTypeError(HRPoseError, TypeError):
    """Tensors of different precision met in one computation graph."""


class ConfigError(HRPoseError, ValueError):
    """Invalid configuration key, value or preset name."""


class BuildError(HRPoseError, ValueError):
    """An HRNet graph could not be built from the given spec."""


class AnnotationError(HRPoseError, ValueError):
    """Annotation or result file violates the documented schema."""

    def __init__(self, message: str, issues: Optional[List[str]] = None):
        self.issues = list(issues or [])
        if self.issues:
            shown = "\n  ".join(self.issues[:20])
            more = f"\n  ... and {len(self.issues) - 20} more" if len(self.issues) > 20 else ""
            message = f"{message}:\n  {shown}{more}"
        super().__init__(message)


class MetricError(HRPoseError, ValueError):
    """A metric is undefined for the given inputs."""


class CheckpointError(HRPoseError, IOError):
    """A checkpoint archive is missing, corrupt or incompatible."""


class TrainingDivergedError(HRPoseError, RuntimeError):
    """The training loss became non-finite."""
