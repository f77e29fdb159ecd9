class NoisyALError(Exception):
    """Base class for library errors."""


class ValidationError(NoisyALError, ValueError):
    """A configuration or argument failed validation."""


class FormatError(NoisyALError):
    """An input file does not match its declared format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AlignmentError(NoisyALError):
    """Features and labels disagree on the number of rows."""
