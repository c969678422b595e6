"""Exception and warning types raised by octlk."""


class OctlkError(Exception):
    """Base class for all octlk errors."""


class DomainError(OctlkError, ValueError):
    """An argument lies outside the admissible domain."""


class DegenerateGeometryError(OctlkError, ValueError):
    """A geometric parameter makes a ratio or denominator vanish."""


class TotalInternalReflectionError(OctlkError, ValueError):
    pass


class QuadratureError(OctlkError, RuntimeError):
    """Angular quadrature failed its refinement check."""


class GridMismatchError(OctlkError, ValueError):
    pass


class NoSignalError(OctlkError):
    """No peak above the detection threshold."""


class DegenerateWindowError(OctlkError):
    pass


class NoContrastError(OctlkError):
    """Recovered index equals the index of the previous layer."""


class NoLayerError(OctlkError):
    """Width functional is flat over the search range."""


class AmbiguousSignError(OctlkError):
    """Both quartic minima tie and the phase test is inconclusive."""


class ReconstructionError(OctlkError):
    """A reconstruction step failed; ``partial`` holds what was recovered."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class RegimeWarning(UserWarning):
    """A small-parameter assumption of the model is violated."""


class WindowCollisionWarning(UserWarning):
    pass


class AccuracyWarning(UserWarning):
    pass
