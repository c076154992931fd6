"""
Exception hierarchy for force2kin.

Every error raised on purpose by the pipeline derives from Force2KinError and
carries the process exit code the CLI reports for it.
"""


class Force2KinError(Exception):
    """Base error. `stage` names the pipeline step that failed."""

    exit_code = 1

    def __init__(self, message: str, stage: str = ""):
        super().__init__(message)
        self.stage = stage


class ConfigError(Force2KinError):
    """Invalid configuration value, unknown key or impossible request."""

    exit_code = 2


class DataError(Force2KinError):
    """Malformed event file, manifest or dataset."""

    exit_code = 3


class AlignmentError(DataError):
    """No onset could be found while aligning force and kinematics."""


class NumericError(Force2KinError):
    """NaN/Inf encountered in a computation."""

    exit_code = 4


class DimensionError(ValueError):
    """Shape mismatch between operands."""


class UnsupportedLengthError(ValueError):
    """FFT length the transform does not support (odd or < 2)."""


class GeometryError(ValueError):
    """Degenerate marker geometry (collinear or coincident points)."""
