"""Exception types shared across the package."""


class EffConfError(Exception):
    """Base class for all package errors."""


class DimensionError(EffConfError, ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class ConfigError(EffConfError, ValueError):
    """Raised for invalid architecture, attention, or run configuration."""


class ContractError(EffConfError, RuntimeError):
    """Raised when an API precondition is violated (e.g. backward on a non-scalar)."""


class InputTooShortError(EffConfError, ValueError):
    """Raised when an input sequence is shorter than the encoder can reduce."""


class RefusalError(EffConfError, ValueError):
    """Raised when a brute-force routine is asked for an intractable instance."""


class DivergenceError(EffConfError, RuntimeError):
    """Raised when training produces a non-finite loss."""
