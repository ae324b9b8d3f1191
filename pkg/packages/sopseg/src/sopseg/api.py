from abc import ABC
from typing import Any, Dict, Optional, Protocol, runtime_checkable, TYPE_CHECKING

if TYPE_CHECKING:
    from sopseg.data import PatchBatch, Prediction
    from sopseg.training import EpochRecord, FitResult


class SopsegError(Exception):
    """Base exception for all pipeline errors, carries the CLI exit code."""

    exit_code: int = 1

    def __init__(self, message: str, cause: Exception = None):
        super().__init__(message)
        self.message = message
        self.__cause__ = cause  # Pass the cause of the exception

    def __str__(self):
        return self.message


class ConfigError(SopsegError):
    """Invalid configuration, or configuration that does not match a checkpoint."""
    exit_code = 2


class DomainError(SopsegError, ValueError):
    """Argument outside the domain of a geometric or prompting operation."""
    exit_code = 2


class DataError(SopsegError):
    """Missing, malformed or empty input data."""
    exit_code = 3


class ShapeError(SopsegError, ValueError):
    """Tensor or array shape contract violated."""
    exit_code = 3


class NumericalError(SopsegError):
    """Non-finite loss or metric during training."""
    exit_code = 4

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None, cause: Exception = None):
        super().__init__(message, cause)
        self.diagnostics = diagnostics or {}


@runtime_checkable
class Predictor(Protocol):
    """Anything that turns a batch of patches into binary masks and quality scores."""

    def predict(self, batch: 'PatchBatch') -> 'Prediction':
        ...


class TrainingObserver(ABC):
    """Receives progress notifications from the training loop. All hooks are optional."""

    def on_train_start(self, total_steps: int, start_step: int) -> None:
        pass

    def on_step(self, step: int, loss: float) -> None:
        pass

    def on_epoch_end(self, record: 'EpochRecord') -> None:
        pass

    def on_train_end(self, result: 'FitResult') -> None:
        pass
