"""Exception types raised across the package."""


class TssrbmError(Exception):
    """Base class for all package errors."""


class DimensionError(TssrbmError, ValueError):
    pass


class ConfigError(TssrbmError, ValueError):
    pass


class FormatError(TssrbmError, ValueError):
    pass


class VersionError(FormatError):
    pass


class IoError(TssrbmError, OSError):
    pass


class NumericalError(TssrbmError, ArithmeticError):
    pass


class DegenerateInputError(TssrbmError, ValueError):
    pass


class ImproperModelError(TssrbmError, ValueError):
    """A Gaussian block of a tiny model has a non-positive precision."""
