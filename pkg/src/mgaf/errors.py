"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed dataset, file, or label structure."""


class ConfigError(ValueError):
    """Unknown configuration key or invalid value."""


class NumericalError(ArithmeticError):
    """Training or evaluation produced non-finite numbers."""
