"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Matrix or vector shapes violate an operation's contract."""


class DivergenceError(RuntimeError):
    """A computation produced non-finite values, or too many trials diverged."""


class ToleranceError(RuntimeError):
    """An adaptive routine could not reach the requested tolerance."""
