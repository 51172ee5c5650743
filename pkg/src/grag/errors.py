"""Exception types shared across the package."""


class GragError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GragError, ValueError):
    """A tensor shape, axis, or index range is inconsistent with the operation."""


class ConfigError(GragError, ValueError):
    """A configuration value violates its documented constraints."""
