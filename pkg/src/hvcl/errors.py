"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConditioningError(ArithmeticError):
    """A kernel matrix could not be factorized even after adding the ridge."""

    def __init__(self, message, min_eigenvalue):
        super().__init__(f"{message} (min eigenvalue {min_eigenvalue:.3e})")
        self.min_eigenvalue = min_eigenvalue


class FormatError(ValueError):
    """A data file does not follow the expected binary layout."""


class StreamError(ValueError):
    """A task stream cannot be built from the given data."""


class ConfigError(ValueError):
    """An experiment configuration is invalid."""
