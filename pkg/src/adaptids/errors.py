"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, TrainingError -> 3.
"""


class AdaptIdsError(Exception):
    """Base class for all package errors."""


class ConfigError(AdaptIdsError):
    """Invalid or contradictory configuration."""


class DataError(AdaptIdsError):
    """Malformed, missing, or inconsistent input data."""


class TrainingError(AdaptIdsError):
    """Optimization failed (non-finite loss, empty dataset, ...)."""
