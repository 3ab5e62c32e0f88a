"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the domain where a quantity is defined."""


class ShapeError(ValueError):
    """Array lengths do not match the hierarchy they are meant to describe."""


class CapabilityError(ValueError):
    """The requested computation is not supported for this configuration."""


class TruncationError(RuntimeError):
    """A truncated series could not reach the requested tail bound.

    The achieved bound is kept on ``achieved`` so callers can decide
    whether it is good enough anyway.
    """

    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved bound {achieved:.3e})")
        self.achieved = achieved


class NumericalError(RuntimeError):
    """A quadrature or iterative routine failed to converge."""
