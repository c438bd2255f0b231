"""
Exception hierarchy for moldpilot.
Every error also derives from the closest builtin so callers can catch ValueError/RuntimeError.
"""
from __future__ import annotations


class MoldpilotError(Exception):
    """Base class for all toolkit errors."""


class RangeError(MoldpilotError, ValueError):
    """A value lies outside its declared range."""

    def __init__(self, message: str, *, cycle_index: int | None = None):
        if cycle_index is not None:
            message = f"cycle {cycle_index}: {message}"
        super().__init__(message)
        self.cycle_index = cycle_index


class NumericalFaultError(MoldpilotError, ArithmeticError):
    """A computation produced a non-finite intermediate value."""


class ShapeError(MoldpilotError, ValueError):
    """Array or topology shapes are inconsistent."""


class CapacityError(MoldpilotError, ValueError):
    """A requested object exceeds a size bound."""


class InferenceError(MoldpilotError, ValueError):
    """Data cannot support the requested statistical inference or fit."""


class DivergenceError(MoldpilotError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


class ModeError(MoldpilotError, ValueError):
    """Operation called on a network with the wrong recurrence kind."""


class StateError(MoldpilotError, RuntimeError):
    """Object is not in the state the operation requires (e.g. untrained net)."""


class InfeasibleScheduleError(MoldpilotError, ValueError):
    """Measurement tasks do not fit inside the idle window."""

    def __init__(self, overflow: float, message: str | None = None):
        super().__init__(message or f"measurement plan overflows the idle window by {overflow:.3f} s")
        self.overflow = overflow


class ConfigError(MoldpilotError, ValueError):
    """Scenario file could not be parsed or validated."""

    def __init__(self, message: str, *, line: int | None = None, column: int | None = None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class UnknownKeyError(ConfigError):
    """Scenario file contains a key that no model declares."""

    def __init__(self, key: str):
        super().__init__(f"unknown config key: {key}")
        self.key = key


class MissingSeedError(ConfigError):
    """Scenario file has no seed."""

    def __init__(self) -> None:
        super().__init__("config must set 'seed' (no wall-clock default)")


class ScenarioError(MoldpilotError, RuntimeError):
    """A module error raised while running a scenario, with scenario context."""

    def __init__(self, kind: str, cause: Exception):
        super().__init__(f"scenario '{kind}' failed: {cause}")
        self.kind = kind
        self.cause = cause
