"""Exception types raised by the fieldloc package."""


class FieldlocError(Exception):
    """Base class for all fieldloc errors."""


class AngleNearPi(FieldlocError):
    """Rotation angle is within tolerance of 180 degrees; the log map is not unique."""


class NonConvergence(FieldlocError):
    """Iterative solver hit its iteration cap without meeting tolerance."""


class OutOfBounds(FieldlocError):
    """Pixel coordinate outside the image bounds."""


class BadCount(FieldlocError):
    """Requested sample count outside the valid range."""


class BadSpec(FieldlocError):
    """Initialization spec is inconsistent with the requested mode."""


class TooShort(FieldlocError):
    """Trajectory has too few samples to derive odometry."""


class ParseError(FieldlocError):
    """Malformed trajectory/odometry file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonMonotonicTimestamps(FieldlocError):
    """Timestamps in a trajectory file must be strictly increasing."""


class ConfigError(FieldlocError):
    """Scenario configuration is invalid."""
