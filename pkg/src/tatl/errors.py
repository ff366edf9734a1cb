"""Exception hierarchy shared by every tatl module."""


class TatlError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TatlError, ValueError):
    """Array shapes or extents disagree."""


class RangeError(TatlError, ValueError):
    """A value lies outside its admissible range."""


class DataError(TatlError):
    """A dataset is empty or lacks what the requested operation needs."""


class NumericsError(TatlError, ArithmeticError):
    """A computation produced non-finite values."""


class IoError(TatlError, OSError):
    """A file is missing or malformed. ``path`` names the offending file."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
