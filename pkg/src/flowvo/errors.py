"""Exception types raised across the package."""


class FlowVOError(ValueError):
    pass


class NonCanonicalRotation(FlowVOError):
    """Axis-angle vector with magnitude >= pi."""


class NearPiRotation(FlowVOError):
    """Rotation angle too close to pi for a stable logarithm."""


class NonFinite(FlowVOError):
    pass


class BehindCamera(FlowVOError):
    pass


class InvalidCrop(FlowVOError):
    pass


class Infeasible(FlowVOError):
    pass


class EmptyMask(FlowVOError):
    pass


class ShapeMismatch(FlowVOError):
    pass


class Diverged(FlowVOError):
    pass


class DegenerateTrajectory(FlowVOError):
    pass


class TrajectoryTooShort(FlowVOError):
    pass


class FormatError(FlowVOError):
    """Malformed config, flow, mask, trajectory or checkpoint file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
