"""Exception types raised across the package."""


class Retime4DError(Exception):
    """Base class for all package errors."""


class DegenerateRotationError(Retime4DError):
    """Raised when a rotation polynomial evaluates to a (near) zero quaternion."""


class InactivePrimitiveError(Retime4DError):
    """Raised when a compensation factor is requested for an invisible primitive."""


class ContractViolation(Retime4DError):
    """Raised when a caller breaks an operation's precondition."""


class FormatError(Retime4DError):
    """Raised for malformed or truncated files. The message names the path."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class MissingFileError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class NonFiniteLossError(Retime4DError):
    """Raised by the training loop when a loss term stops being finite."""

    def __init__(self, term: str, iteration: int, value: float):
        self.term = term
        self.iteration = iteration
        self.value = value
        super().__init__(f"non-finite loss term '{term}' at iteration {iteration}: {value}")
