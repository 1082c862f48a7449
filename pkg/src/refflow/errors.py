"""Exception types shared across the package.

The CLI maps these onto process exit codes: invalid arguments are usage
errors (2), invalid state is 3, numerical failures are 4.
"""


class RefflowError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(RefflowError, ValueError):
    """An argument violates a documented precondition."""


class InvalidStateError(RefflowError, RuntimeError):
    """An operation was invoked before its prerequisites exist."""


class DegenerateInputError(InvalidArgumentError):
    """Input is numerically degenerate (e.g. a zero-norm vector fed to a cosine)."""


class NumericalError(RefflowError, ArithmeticError):
    """A computation produced non-finite values."""


class SamplingDivergedError(NumericalError):
    """The sampler state became non-finite mid-trajectory."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"sampler state became non-finite at step {step}")
