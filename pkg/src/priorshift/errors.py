"""Exception types shared across the package."""


class PriorShiftError(Exception):
    """Base class for all package errors."""


class DimensionError(PriorShiftError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class GraphError(PriorShiftError, RuntimeError):
    """Autodiff graph misuse (non-scalar loss, repeated backward, ...)."""


class NumericsError(PriorShiftError, FloatingPointError):
    """A forward op produced NaN/Inf from finite inputs."""


class ParseError(PriorShiftError, ValueError):
    """Malformed input file; message carries the offending line number."""


class ConfigError(PriorShiftError, ValueError):
    """Invalid or inconsistent configuration."""


class ContractError(PriorShiftError, ValueError):
    """A documented precondition was violated by the caller."""
