"""Exception and warning types shared across the package."""


class AfterKernelError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(AfterKernelError):
    """A requested architecture, width target, or config is unbuildable."""


class InputError(AfterKernelError):
    """Caller passed data violating a documented precondition."""


class DegenerateInputError(AfterKernelError):
    """Numerically meaningless input (e.g. an all-zero matrix)."""


class FormatError(AfterKernelError):
    """A binary file failed to parse. Carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PowerIterationWarning(UserWarning):
    """Power iteration hit its iteration cap before converging."""


class SkippedPairsWarning(UserWarning):
    """More than 1% of invariance pairs had a zero embedding and were skipped."""
