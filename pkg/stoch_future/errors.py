"""Exception hierarchy for Stoch-Future"""

from typing import Optional


class StochFutureError(Exception):
    """Base class for all Stoch-Future errors"""
    exit_code = 1


class ShapeError(StochFutureError):
    """Tensor shapes or geometry are inconsistent"""


class InvalidInputError(StochFutureError):
    """A value is outside its admissible range (mask, depth, horizon, sample count)"""


class NumericalError(StochFutureError):
    """NaN or Inf encountered in a forward or backward pass"""
    exit_code = 3

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step

    def __str__(self) -> str:
        message = super().__str__()
        if self.step is not None:
            return f"{message} (step {self.step})"
        return message


class ConfigError(StochFutureError):
    """Unknown key, invalid value or incompatible model/world pairing"""
    exit_code = 2


class CheckpointError(StochFutureError):
    """Checkpoint file is malformed or does not match the model"""
    exit_code = 2


class DatasetError(StochFutureError):
    """Dataset directory is missing files or a sequence file is corrupt"""


def exit_code_for(exc: BaseException) -> int:
    """
    Map an exception onto a CLI exit code

    Args:
        exc: Exception raised by a command

    Returns:
        0 success, 1 usage error, 2 config/checkpoint mismatch,
        3 numerical abort, 130 interrupted
    """
    if isinstance(exc, KeyboardInterrupt):
        return 130
    if isinstance(exc, StochFutureError):
        return exc.exit_code
    return 1
