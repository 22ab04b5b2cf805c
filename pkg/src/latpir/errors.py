"""Exception types shared across the package."""


class PirError(Exception):
    """Base class for all package errors."""


class InvalidArgument(PirError, ValueError):
    """An argument violates a documented precondition."""


class InvalidState(PirError, RuntimeError):
    """A value is in the wrong state for the requested operation (e.g. NTT domain mismatch)."""


class InvalidConfig(PirError, ValueError):
    """A configuration object is internally inconsistent or violates a resource budget."""


class ParseError(PirError, ValueError):
    """Malformed wire or container bytes.

    Carries ``offset``, the byte position where parsing failed.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset
