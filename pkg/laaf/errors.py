# laaf/errors.py
"""Exceptions raised by the laaf services, with the CLI exit code each maps to."""
from __future__ import annotations

from typing import Any


class LaafError(RuntimeError):
    exit_code = 3


class TapeError(LaafError):
    """A Var used on a tape that did not create it, or a malformed tape request."""


class DomainError(LaafError, ValueError):
    """Non-finite input or an argument outside a primitive's domain."""


class ShapeError(LaafError, ValueError):
    pass


class ModeError(LaafError, ValueError):
    """The operation is not defined for this activation mode."""


class ConfigError(LaafError):
    exit_code = 2


class LineSearchError(LaafError):
    pass


class VerificationError(LaafError):
    exit_code = 1


class DivergenceError(LaafError):
    """Loss or gradient became non-finite during training."""

    def __init__(self, message: str, iteration: int | None = None, trace: Any = None):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace
