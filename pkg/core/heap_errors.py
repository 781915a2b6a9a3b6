"""
Heaping Lab - Error Types
=========================
Every failure the library can report derives from HeapError so callers
(the CLI in particular) can catch one type and map it to an exit status.
"""

from typing import Optional


class HeapError(Exception):
    """Base class for all heaping-lab failures."""


class TruncationError(HeapError, RuntimeError):
    """State-space truncation did not converge within the cap-doubling limit."""


class NumericalError(HeapError, ArithmeticError):
    """Singular solve, overflow of a linear predictor, or a non-SPD matrix."""


class AccuracyError(HeapError, RuntimeError):
    """Laplace inversion residual exceeded the target absolute error."""


class DomainError(HeapError, ValueError):
    """Arguments outside the domain of an operation."""


class IngestionError(DomainError):
    """A data file failed validation. Names the offending row and column."""

    def __init__(self, message: str, row: Optional[int] = None,
                 column: Optional[str] = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class SamplerAbort(HeapError, RuntimeError):
    """A block update failed; the sampler state was dumped to dump_path."""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.dump_path = dump_path
        if dump_path is not None:
            message = f"{message} [state dump: {dump_path}]"
        super().__init__(message)
