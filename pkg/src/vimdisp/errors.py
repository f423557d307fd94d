"""Exception hierarchy shared by all vimdisp modules."""


class VimDispError(Exception):
    """Base class for package errors."""


class ValidationError(VimDispError, ValueError):
    """An argument violates a documented precondition."""


class DimensionError(ValidationError):
    """Tensor shapes or sequence lengths do not line up."""


class FormatError(VimDispError, ValueError):
    """A file on disk does not follow its declared format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(VimDispError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class DomainError(VimDispError, ValueError):
    """A metric is undefined for the given inputs."""


class UnsupportedError(VimDispError, RuntimeError):
    """The requested probe is unavailable on this platform."""
