"""
Exception hierarchy shared by the simulator modules.
"""

from typing import List, Optional, Sequence


class SimulationError(Exception):
    """Base class for every error raised by the simulator."""


class ContractViolationError(SimulationError, ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigurationError(SimulationError, ValueError):
    """A scenario or model parameter is invalid."""


class ReducibleChainError(ConfigurationError):
    """A Markov chain that must be irreducible is not."""


class UndefinedDelayError(SimulationError, ArithmeticError):
    """Average delay is undefined (everything dropped or nothing offered)."""


class ConvergenceError(SimulationError, RuntimeError):
    """An iterative solver stopped before meeting its tolerance."""

    def __init__(self, message: str, history: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.history: List[float] = list(history or [])


class InfeasibleTargetError(ConvergenceError):
    """Multiplier tuning could not meet its constraint targets."""

    def __init__(self, message: str, residuals: Optional[dict] = None,
                 history: Optional[Sequence[float]] = None):
        super().__init__(message, history)
        self.residuals = dict(residuals or {})
