"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all errors raised by trojanscan."""


class ShapeError(ToolkitError):
    """Tensor shape or dtype inconsistency in an engine operation."""


class NonFiniteError(ToolkitError):
    """An engine operation produced NaN or Inf values."""


class FormatError(ToolkitError):
    """A file does not conform to one of the on-disk formats."""


class ConfigError(ToolkitError):
    """Invalid experiment or scan configuration."""
