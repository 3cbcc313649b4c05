"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: UsageError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class AtlasSegError(Exception):
    """Base class for all package errors."""


class UsageError(AtlasSegError):
    """Bad arguments or configuration."""


class DataError(AtlasSegError):
    """Malformed files, inconsistent grids, invalid masks or manifests."""


class NumericalError(AtlasSegError):
    """NaN/Inf losses, divergence, or failed iterative solves."""
