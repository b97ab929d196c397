"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class CBDError(Exception):
    exit_code = 1


class ValidationError(CBDError, ValueError):
    exit_code = 2


class ShapeError(ValidationError):
    pass


class StateError(CBDError, RuntimeError):
    """Operation not allowed in the object's current state (e.g. stepping a finished episode)."""

    exit_code = 2


class NumericError(CBDError, ArithmeticError):
    exit_code = 3


class GenerationError(NumericError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FileFormatError(CBDError):
    """Base class for on-disk format problems. ``code`` distinguishes the failure kind."""

    exit_code = 2
    code = "format"


class VersionMismatchError(FileFormatError):
    code = "version"


class TruncatedFileError(FileFormatError):
    code = "truncated"


class ChecksumError(FileFormatError):
    code = "checksum"
