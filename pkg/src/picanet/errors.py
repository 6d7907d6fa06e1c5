"""Exception types raised across the package."""


class PicanetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PicanetError, ValueError):
    """Incompatible shapes, grids or network/config settings."""


class DataError(PicanetError, ValueError):
    """Invalid input data (masks outside [0, 1], empty ground truth, ...)."""


class NumericalError(PicanetError, ArithmeticError):
    """A non-finite value was produced, or a gradient check failed."""


class CheckpointError(PicanetError, IOError):
    """Malformed, truncated or incompatible checkpoint file."""
