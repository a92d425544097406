"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration value or structure."""


class ShapeError(ValueError):
    """Mismatched array dimensions or incompatible architectures."""


class NumericError(ArithmeticError):
    """Non-finite values encountered where finite ones are required."""


class DataError(ValueError):
    """Dataset or partition violates a structural requirement."""
