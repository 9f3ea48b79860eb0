"""Exception hierarchy shared by the library and the CLI."""


class QuadsError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(QuadsError, ValueError):
    pass


class UserError(QuadsError):
    """Bad configuration, missing or malformed input files (CLI exit code 1)."""


class FormatError(UserError):
    """A packed model or WAV file failed validation."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(QuadsError):
    """Non-finite loss or gradient (CLI exit code 2)."""
