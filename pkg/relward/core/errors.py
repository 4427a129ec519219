"""Exception hierarchy shared by the pipeline and the CLI."""

from typing import Optional


class RelwardError(Exception):
    """Base class for every error raised by relward."""


class ArgumentError(RelwardError, ValueError):
    """An operation was called with arguments outside its preconditions."""


class FormatError(RelwardError, ValueError):
    """A file or text record does not follow the expected layout."""


class UnsupportedFormatError(FormatError):
    """A well-formed file uses an encoding relward does not accept."""

    def __init__(self, field: str, value: object, expected: object):
        self.field = field
        self.value = value
        self.expected = expected
        super().__init__(f"unsupported {field}: got {value!r}, expected {expected!r}")


class DegenerateInputError(ArgumentError):
    """Input carries no usable signal (e.g. zero power)."""


class DegenerateBatchError(ArgumentError):
    """Batch statistics cannot be computed from the given batch."""


class ContractError(RelwardError):
    """Internal shape or state contract violated between pipeline stages."""

    def __init__(self, message: str, stage: Optional[str] = None):
        self.stage = stage
        super().__init__(f"[{stage}] {message}" if stage else message)


class DataError(RelwardError):
    """Dataset or manifest problem (missing, empty, unreadable)."""
