"""Exception hierarchy shared by every module."""


class HSIFusionError(Exception):
    """Base class for all package errors."""


class ValidationError(HSIFusionError, ValueError):
    """Input violates a documented precondition or invariant."""


class CubeFormatError(HSIFusionError):
    """On-disk cube or checkpoint could not be decoded."""

    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class BadMagicError(CubeFormatError):
    pass


class UnsupportedVersionError(CubeFormatError):
    pass


class ShortReadError(CubeFormatError):
    pass


class CheckpointError(CubeFormatError):
    pass


class DivergenceError(HSIFusionError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, step=None, parameter=None):
        self.step = step
        self.parameter = parameter
        super().__init__(message)
