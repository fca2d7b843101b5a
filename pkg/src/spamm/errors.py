"""Exception types shared across the package."""


class SpammError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(SpammError, ValueError):
    """A distribution or algorithm parameter is outside its valid domain."""


class DimensionError(SpammError, ValueError):
    """Arguments have inconsistent dimensions."""


class DegenerateDirectionError(SpammError, ValueError):
    """Both resultant components are zero, so no direction is defined."""


class DegenerateSampleError(SpammError, RuntimeError):
    """A sample has zero density under every mixture component."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"sample {index} has zero density under every component")


class UndefinedStatisticError(SpammError, ValueError):
    """A test statistic is undefined, e.g. all weights are zero."""


class BoundTooLooseError(SpammError, RuntimeError):
    """Rejection sampling made essentially no progress; the bound M is too loose."""
