"""Exception hierarchy shared by all texqual modules.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class TexqualError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TexqualError):
    """Malformed spec file, bad option combination, missing path."""


class DataError(TexqualError):
    """Invalid data fed to an operation."""


class BoundsError(DataError):
    """Rectangle or window not contained in the host image."""


class SizeError(DataError):
    """Dimension constraint violated (too small, mismatched, ...)."""


class MetricError(DataError):
    """Rank correlation undefined (e.g. constant input vector)."""


class FleetError(DataError):
    """Device fleet generation could not satisfy its constraints."""


class RegistrationError(DataError):
    """Alignment failed: too few corners, matches, or inliers."""


class CheckpointError(DataError):
    """Model checkpoint missing, truncated, or corrupt."""


class NumericError(TexqualError):
    """Non-finite values where finite ones are required."""
