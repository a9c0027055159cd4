"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, FormatError -> 3,
NumericError -> 4.  Everything else is a plain bug.
"""


class EmitterScanError(Exception):
    """Base class for all package errors."""


class ConfigError(EmitterScanError):
    """Invalid configuration or command arguments."""


class FormatError(EmitterScanError):
    """Unreadable or corrupt on-disk data."""


class NumericError(EmitterScanError):
    """A numeric routine failed to produce a usable result."""


class FitError(NumericError):
    """Nonlinear fit failed to converge.

    Carries the best iterate so callers can inspect or salvage it.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
