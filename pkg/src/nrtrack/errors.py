"""Exception types raised by the tracking library."""


class TrackingError(Exception):
    """Base class for all nrtrack errors."""


class InvalidInputError(TrackingError):
    """Malformed input value (non-positive depth, bad intrinsics, ...)."""


class BehindCameraError(TrackingError):
    """Projection requested for a point with z <= 0."""


class EmptyMeshError(TrackingError):
    """Depth mesh construction received fewer than 3 valid pixels."""


class UnsupportedPointError(TrackingError):
    """Warp requested for a point with no supporting graph node."""


class UnderdeterminedSystemError(TrackingError):
    """No usable correspondences / all node clusters deactivated."""


class SingularSystemError(TrackingError):
    """Gauss-Newton normal matrix is singular."""


class SolverDivergenceError(TrackingError):
    """Solver produced a non-finite increment."""


class GenerationError(TrackingError):
    """Synthetic scene generation received degenerate parameters."""
