"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, NumericalAbort -> 3.
"""


class AgnetError(Exception):
    """Base class for all package errors."""


class ShapeError(AgnetError, ValueError):
    """Dimension mismatch; the message names the offending axes."""


class ConfigError(AgnetError, ValueError):
    """Bad run configuration or command usage."""


class DataError(AgnetError, ValueError):
    """Unreadable, inconsistent, or missing data artifacts."""


class CheckpointError(DataError):
    """Corrupt or truncated checkpoint / tensor file."""


class NumericalAbort(AgnetError, RuntimeError):
    """Training diverged (non-finite loss or gradients)."""
