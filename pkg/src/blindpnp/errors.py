"""Exception hierarchy shared across the library."""


class BlindPnpError(Exception):
    """Base class for all library errors."""


class ValidationError(BlindPnpError, ValueError):
    """An input violates a documented precondition."""


class DegenerateGeometryError(BlindPnpError):
    """A geometric configuration admits no well-posed solution
    (collinear minimal sets, coincident points, and similar)."""


class NumericalError(BlindPnpError):
    """A numerical procedure failed (singular system, factorization
    breakdown) in a way the caller may want to recover from."""


class SingularHessianError(NumericalError):
    """The pose Hessian is singular or too ill-conditioned for the
    implicit backward pass.  Carries the condition estimate so a
    training loop can decide to skip the example."""

    def __init__(self, message: str, condition_number: float):
        super().__init__(message)
        self.condition_number = condition_number


class InstanceFormatError(BlindPnpError, ValueError):
    """An instance file could not be parsed.  The message carries the
    line number and section that failed."""


class StageError(BlindPnpError):
    """Wraps an error raised inside a pipeline stage with the stage name."""

    def __init__(self, stage: str, original: BaseException):
        super().__init__(f"pipeline stage '{stage}' failed: {original}")
        self.stage = stage
        self.original = original
