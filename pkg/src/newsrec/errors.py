"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError (and
subclasses) -> 2, NumericError -> 3.
"""


class NewsrecError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(NewsrecError):
    """Invalid arguments, configuration, or API misuse."""


class DataError(NewsrecError):
    """Malformed or inconsistent input data."""


class FormatError(DataError):
    """A binary artifact file failed magic/version/checksum validation."""


class NumericError(NewsrecError):
    """Non-finite values or dimension mismatches in numeric code."""


class SkipUser(NewsrecError):
    """A single user cannot be processed; callers count and move on."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class UndefinedAUCError(NewsrecError):
    """AUC is undefined because only one class is present."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason
