"""Exception types shared across the package."""


class SkywindError(Exception):
    """Base class for all package errors."""


class InputError(SkywindError, ValueError):
    """Raised when an argument violates an operation's preconditions."""


class LayerEmptyError(SkywindError):
    """Raised when a layer statistic is requested but no pixels support it."""
