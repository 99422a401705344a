"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor shapes or dtypes are incompatible with an operation."""


class FormatError(ValueError):
    """Raised on malformed serialized data (files, manifests, requests).

    When the problem is located at a known byte position, ``offset`` carries it.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteError(ArithmeticError):
    """Raised when a loss or gradient stops being finite."""
