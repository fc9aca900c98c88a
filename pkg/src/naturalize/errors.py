"""Exception types shared across the package."""

from __future__ import annotations


class DimensionError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


class DegenerateBatchError(DimensionError):
    """Batch statistics are undefined (fewer than two values per channel)."""


class ContractError(RuntimeError):
    """An API precondition was violated (non-scalar loss, consumed tape, untrained model)."""


class UndefinedMetricError(ZeroDivisionError):
    """A metric's denominator is zero."""


class CheckpointError(Exception):
    code = 10


class CheckpointMagicError(CheckpointError):
    code = 11


class CheckpointVersionError(CheckpointError):
    code = 12


class CheckpointTruncatedError(CheckpointError):
    code = 13


class ArchMismatchError(CheckpointError):
    code = 14


class NonFiniteLossError(FloatingPointError):
    """A training loss came out NaN or infinite."""


class ScenarioError(RuntimeError):
    """A scenario sub-step failed; ``stage`` names which one."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"scenario aborted at stage '{stage}': {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
