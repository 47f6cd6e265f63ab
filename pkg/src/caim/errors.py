"""Exception taxonomy shared across the package."""


class CaimError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CaimError):
    """Tensor or series shapes are inconsistent with the operation."""


class ConfigError(CaimError):
    """Invalid configuration value or argument combination."""


class FormatError(CaimError):
    """A binary container (cube, checkpoint, map file) is malformed."""


class GenerationError(CaimError):
    """Synthetic scene generation could not satisfy the request."""


class GradCheckError(CaimError):
    """Gradient verification produced non-finite values."""
