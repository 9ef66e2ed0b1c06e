"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(ValueError):
    """A binary file does not match its expected layout."""


class UsageError(ValueError):
    """Invalid arguments or configuration."""
