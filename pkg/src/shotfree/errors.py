"""Exception types raised across the package."""


class ShotFreeError(Exception):
    """Base class for all library errors."""


class DimensionError(ShotFreeError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ShotFreeError, ValueError):
    """A precondition of an operation was violated."""


class DegenerateInputError(ShotFreeError, ValueError):
    """A vector that must be normalized has (near) zero norm.

    In practice this means the embedding or the metric map collapsed.
    """


class NonFiniteError(ShotFreeError, FloatingPointError):
    """An operation produced NaN or Inf."""


class OracleError(ShotFreeError):
    """A verification oracle could not be evaluated reliably."""


class ProtocolError(ShotFreeError, ValueError):
    """Episode or task construction is impossible with the given data."""


class DatasetFormatError(ShotFreeError, ValueError):
    """A dataset file failed validation.

    ``problems`` lists one human-readable message per offending line.
    """

    def __init__(self, message, problems=()):
        self.problems = list(problems)
        if self.problems:
            message = message + "\n  " + "\n  ".join(self.problems)
        super().__init__(message)


class DivergenceError(ShotFreeError, FloatingPointError):
    """An optimization run diverged (NaN loss or unbounded growth)."""

    def __init__(self, message, iteration=None, lr=None):
        self.iteration = iteration
        self.lr = lr
        super().__init__(message)
