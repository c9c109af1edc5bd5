"""Exception hierarchy shared by every stage of the pipeline."""


class SynthLongError(Exception):
    """Base class for all package errors."""


class InvalidArgument(SynthLongError, ValueError):
    """An argument violates a documented precondition."""


class NumericalFailure(SynthLongError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""

    def __init__(self, message, **diagnostics):
        if diagnostics:
            detail = ", ".join(f"{k}={v!r}" for k, v in diagnostics.items())
            message = f"{message} ({detail})"
        super().__init__(message)
        self.diagnostics = diagnostics


class UndefinedMetric(SynthLongError, ValueError):
    """A metric is mathematically undefined for the given inputs."""


class ChecksumMismatch(SynthLongError):
    """A file on disk does not match the checksum recorded in its manifest."""

    def __init__(self, path, expected, actual):
        super().__init__(f"checksum mismatch for {path}: expected {expected}, got {actual}")
        self.path = path


class UnsupportedVersion(SynthLongError):
    """A manifest was written with a schema version this reader does not know."""


class AcceptanceGateFailure(SynthLongError):
    """A --check gate failed at the end of a run."""
