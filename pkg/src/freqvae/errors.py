"""Exception types shared across the package."""


class FreqVaeError(Exception):
    """Base class for all library errors."""


class ShapeError(FreqVaeError, ValueError):
    """Tensor dimensions are incompatible with the requested operation."""


class UsageError(FreqVaeError, ValueError):
    """An operation was called outside its contract (bad argument, wrong call order)."""


class ConfigError(FreqVaeError, ValueError):
    """A configuration value is outside its allowed range or combination."""


class FormatError(FreqVaeError, ValueError):
    """A file does not match its documented byte format."""


class NumericError(FreqVaeError, ArithmeticError):
    """A computation produced or received non-finite values."""
