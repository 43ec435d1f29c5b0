"""Exception types raised across the package."""


class AwoptError(Exception):
    """Base class for all package errors."""


class ShapeError(AwoptError, ValueError):
    """Array dimensions do not match what an operation expects."""


class NumericError(AwoptError, ArithmeticError):
    """A non-finite value showed up in a loss, gradient, or target."""


class UsageError(AwoptError, RuntimeError):
    """An API was called in a state or with inputs that violate its contract."""


class ConfigError(AwoptError, ValueError):
    """Invalid or contradictory configuration."""


class EmptyBufferError(UsageError):
    pass


class DataGenerationError(AwoptError, RuntimeError):
    pass
