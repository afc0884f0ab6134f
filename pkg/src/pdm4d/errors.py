"""Exception types shared across the package."""


class MeshParseError(ValueError):
    """Malformed mesh file. Message carries the offending line number."""


class MeshStructureError(ValueError):
    """Structurally invalid mesh data (bad indices, degenerate faces)."""


class ProjectionError(ValueError):
    """Point cannot be projected (lies on the camera axis)."""


class RingIntersectionError(ValueError):
    """Mesh geometry reaches or crosses the camera ring."""


class CameraMismatchError(ValueError):
    """Operation received a PDM rendered with a different camera."""


class CorrespondenceError(ValueError):
    """Correspondence map does not cover the requested vertices."""


class TrainingError(RuntimeError):
    """Optimization diverged. Carries the step index where it happened."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class RefineError(ValueError):
    """Trajectory refinement cannot proceed (missing data or no seed)."""


class MetricError(ValueError):
    """Metric undefined for the given inputs (shape, emptiness, static)."""


class FormatError(ValueError):
    """Malformed binary container (bad magic, version, or layout)."""
