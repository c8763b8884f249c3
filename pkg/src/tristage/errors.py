"""Exception hierarchy shared by every module."""


class TristageError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(TristageError, ValueError):
    pass


class UnsupportedRateError(TristageError, ValueError):
    pass


class ShapeMismatchError(TristageError, ValueError):
    pass


class DegenerateInputError(TristageError, ValueError):
    """Raised when a signal has zero power where a non-silent one is required."""


class DegenerateReferenceError(DegenerateInputError):
    pass


class CodecAdapterError(TristageError, RuntimeError):
    def __init__(self, message: str, stderr: str = ""):
        super().__init__(f"{message}\n{stderr}".strip())
        self.stderr = stderr


class ConfigurationError(TristageError):
    pass


class NonFiniteLossError(TristageError, RuntimeError):
    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
