"""Exception types shared across the package."""


class UCError(Exception):
    """Base class for all errors raised by ucgsd."""


class ShapeError(UCError, ValueError):
    pass


class NumericError(UCError, ArithmeticError):
    pass


class DegenerateInputError(UCError, ValueError):
    pass


class ConvergenceError(UCError, RuntimeError):
    """Sparse balancing did not reach tolerance; ``residual`` holds the last value."""

    def __init__(self, message, residual=float("nan"), iters=0):
        super().__init__(message)
        self.residual = residual
        self.iters = iters


class ConstraintViolationError(UCError, ValueError):
    pass


class UnsupportedStructureError(UCError, ValueError):
    pass


class ConfigError(UCError, ValueError):
    pass
