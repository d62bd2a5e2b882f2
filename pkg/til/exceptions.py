"""Exception types raised across the lab.

Each error also derives from the builtin a caller would naturally catch, so
``except ValueError`` around a parser keeps working.
"""

from pathlib import Path
from typing import Iterable, Optional


class TilError(Exception):
    """Base class for all lab errors."""


class ParseError(TilError, ValueError):
    """Malformed template document."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class InvalidInputError(TilError, ValueError):
    """Value outside its declared bounds or with the wrong dimensions."""


class ContractError(TilError, ValueError):
    """An operation received inputs that break its contract."""


class ConfigurationError(TilError, ValueError):
    """Inconsistent or incomplete configuration."""


class ProtocolError(TilError, ValueError):
    """Evaluation protocol violated (shape mismatch, train/eval overlap)."""


class IngestionError(TilError, ValueError):
    """External score file does not cover the requested pairs."""

    def __init__(self, message: str, pair_ids: Optional[Iterable[str]] = None):
        self.pair_ids = sorted(pair_ids) if pair_ids is not None else []
        if self.pair_ids:
            message = f"{message}: {', '.join(self.pair_ids)}"
        super().__init__(message)


class DependencyError(TilError, FileNotFoundError):
    """A required upstream artifact (checkpoint, dataset) is missing."""

    def __init__(self, message: str, dependency: str):
        super().__init__(message)
        self.dependency = dependency

    def __str__(self) -> str:
        return self.args[0]


class UsageError(TilError, RuntimeError):
    """A network was used before it was trained."""


class GenerationError(TilError, RuntimeError):
    """Synthetic data generation did not converge."""


class NumericError(TilError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, snapshot: Optional[Path] = None):
        if snapshot is not None:
            message = f"{message} (diagnostic snapshot: {snapshot})"
        super().__init__(message)
        self.snapshot = snapshot
