"""Exception types shared across the package."""


class VoxtractError(Exception):
    """Base class for all package errors."""


class InvalidInputError(VoxtractError, ValueError):
    """An operation received data that violates its preconditions."""


class ConfigError(VoxtractError, ValueError):
    """Invalid, incomplete, or contradictory configuration."""


class FormatError(VoxtractError):
    """Corrupt, truncated, or wrong-version serialized artifact."""


class NumericError(VoxtractError, ArithmeticError):
    """A computation produced non-finite values or diverged."""


class StateError(VoxtractError, RuntimeError):
    """An operation was called out of order (e.g. backward without a recorded forward)."""
