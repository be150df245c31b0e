"""Exception types shared across the package."""


class ImagimapError(Exception):
    """Base class for all package errors."""


class ParameterError(ImagimapError, ValueError):
    """A scalar parameter is outside its allowed domain."""


class DimensionError(ImagimapError, ValueError):
    """Array shapes do not agree."""


class GridSizeError(ImagimapError, ValueError):
    """A rasterized grid would exceed the configured maximum size."""


class PreconditionError(ImagimapError, ValueError):
    """An operation was called on inputs that violate its precondition."""


class ConfigError(ImagimapError, ValueError):
    """Invalid or inconsistent run configuration."""


class MissingInputError(ImagimapError, FileNotFoundError):
    """A required input file is absent."""


class InvariantViolation(ImagimapError, RuntimeError):
    """A runtime invariant check failed."""
