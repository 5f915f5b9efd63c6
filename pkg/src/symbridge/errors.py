"""Exception hierarchy shared by every module.

Each class maps onto one CLI exit code (see :mod:`symbridge.cli`).
"""


class SymBridgeError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class DomainError(SymBridgeError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigError(SymBridgeError, ValueError):
    """A job or measure description is malformed or inconsistent."""


class PreconditionError(SymBridgeError, ValueError):
    """An input violates a stated precondition (e.g. non-integral counts)."""


class GuardError(SymBridgeError, ValueError):
    """A brute-force routine refused to run beyond its enumeration limits."""


class ConvergenceError(SymBridgeError, RuntimeError):
    """An iterative solver stopped without meeting its tolerance.

    The iteration history is kept on ``history`` so that callers (and the
    CLI) can persist it instead of silently using a partial result.
    """

    exit_code = 2

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []
