"""Exception hierarchy shared by every subpackage."""

from __future__ import annotations


class RecupError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RecupError, ValueError):
    """Invalid configuration, shapes, or preconditions supplied by the caller."""


class UsageError(RecupError, RuntimeError):
    """An API was called in a way its contract does not allow."""


class NumericError(RecupError, ArithmeticError):
    """A computation produced a non-finite value."""


class DataError(RecupError, ValueError):
    """A dataset is unusable for the requested operation (e.g. a single class)."""


class ParseError(RecupError, ValueError):
    """A serialized payload or input file could not be decoded.

    ``offset`` is the character offset into the payload where decoding failed,
    or ``None`` when the failure is structural rather than positional.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class SchemaError(ConfigError):
    """A CSV file does not match its declared column schema."""
