"""Exception types shared across the package."""


class MltfrError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(MltfrError):
    """An invalid or inconsistent configuration value."""


class DataFormatError(MltfrError):
    """A malformed interaction file line.

    Attributes:
        line_number: 1-based line number of the offending line, when known.
    """

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyDatasetError(MltfrError):
    """Core filtering removed every sequence."""


class EmptySequenceError(MltfrError):
    """An operation received a sequence with no valid positions."""


class DegenerateInterestError(MltfrError):
    """A pooled interest vector has zero norm, so cosine scores are undefined."""


class VemFormatError(MltfrError):
    """A vocabulary file does not start with the expected magic bytes."""


class VemLengthError(MltfrError):
    """A vocabulary file is shorter than its header promises."""


class VemValidationError(MltfrError):
    """A vocabulary matrix contains non-finite values."""
