"""Exception types shared across the package."""


class NBodyKamError(Exception):
    """Base class for package-specific failures."""


class CollisionError(NBodyKamError, ValueError):
    """A configuration hit a collision where a collision-free one was required."""


class ChartRangeError(NBodyKamError, ValueError):
    """A requested point or scaling left the domain covered by a chart."""


class ConvergenceError(NBodyKamError, RuntimeError):
    """An iterative solver stopped without meeting its tolerance.

    The best iterate found so far is attached when available so callers can
    inspect or report it.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
