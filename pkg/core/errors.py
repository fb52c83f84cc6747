"""Exception hierarchy shared by the numeric core, the trainer and the CLI."""
from __future__ import annotations

from typing import Any


class AmfmError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AmfmError, ValueError):
    pass


class ValidationError(AmfmError, ValueError):
    pass


class StateError(AmfmError, RuntimeError):
    pass


class NumericError(AmfmError, ArithmeticError):
    """A non-finite value showed up; ``where`` names the parameter or coordinate."""

    def __init__(self, message: str, where: Any = None) -> None:
        super().__init__(message)
        self.where = where


class DivergenceError(NumericError):
    def __init__(self, message: str, checkpoint: Any = None, where: Any = None) -> None:
        super().__init__(message, where=where)
        self.checkpoint = checkpoint


class WavFormatError(AmfmError):
    pass


class SampleRateError(ValidationError):
    pass


class CheckpointError(AmfmError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
