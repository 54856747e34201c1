"""
errors.py

Exception types shared by the data, estimator, construction, training and harness modules.
"""
from typing import List, Optional


## Base class for every failure raised by the lab
class LocPolLabError(Exception):
    """Base error for the in-context local polynomial lab."""


class UnsatisfiableSpecError(LocPolLabError):
    """Raised when a task sampler cannot satisfy the Hölder spec within its rejection limit."""


class ShapeMismatchError(LocPolLabError, ValueError):
    """Raised when matrices handed to a forward pass do not conform."""


class LayoutMismatchError(LocPolLabError, ValueError):
    """Raised when a register layout disagrees with the architecture it is wired into."""


class NonFiniteInputError(LocPolLabError, ValueError):
    """Raised when prompt data contains NaN or infinite entries."""


class InfeasibleConstructionError(LocPolLabError):
    """Raised when the explicit transformer cannot be built at the requested configuration."""


class ConfigError(LocPolLabError):
    """Raised for malformed configuration files, flags or values."""


class OverwriteRefusedError(LocPolLabError):
    """Raised when an output file exists and overwriting was not requested."""


## Divergence carries the loss history so callers can report it
class TrainingDivergenceError(LocPolLabError):
    """
    Raised when ERM loss stays above the divergence factor times the initial loss.
    """

    def __init__(self, message: str, loss_history: Optional[List[float]] = None):
        """
        Initialize the error.

        Args:
            message (str): Human readable diagnostic
            loss_history (List[float]): Per-epoch empirical risks recorded before aborting
        """
        super().__init__(message)
        self.loss_history = list(loss_history or [])
