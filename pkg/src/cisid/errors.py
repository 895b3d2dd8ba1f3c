"""Exception hierarchy shared by all cisid modules.

The CLI maps these onto process exit codes: UsageError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class CisidError(Exception):
    """Base class for all cisid errors."""


class UsageError(CisidError):
    """Bad command-line arguments or an inconsistent configuration."""

    exit_code = 1


class DataError(CisidError):
    """Invalid, unreadable or degenerate input data (audio, manifests, models)."""

    exit_code = 2


class NumericalError(CisidError):
    """A numerical procedure produced non-finite or degenerate results."""

    exit_code = 3
