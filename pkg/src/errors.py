"""Exception hierarchy shared by the estimators, the CLI and the job workers."""

from __future__ import annotations

from collections.abc import Sequence
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from .core import ValidationReport


class ExaminerIVError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(ExaminerIVError, ValueError):
    """A caller supplied an argument outside its documented range."""


class DataValidationError(ExaminerIVError):
    """Raised when a dataset fails validation and the caller asked for a hard failure."""

    def __init__(self, report: ValidationReport):
        self.report = report
        super().__init__("; ".join(v.message for v in report.violations))


class SingularityError(ExaminerIVError, ArithmeticError):
    """Least-squares design is rank deficient."""

    def __init__(self, message: str, columns: Sequence[str] = ()):
        self.columns = list(columns)
        if self.columns:
            message = f"{message}: {', '.join(self.columns)}"
        super().__init__(message)


class JackknifeSingularityError(SingularityError):
    """Leave-one-out regression impossible because some row has leverage >= 1."""

    def __init__(self, rows: Sequence[int]):
        self.rows = [int(r) for r in rows]
        shown = ", ".join(str(r) for r in self.rows[:10])
        super().__init__(f"leverage >= 1 for rows {shown}")


class ConvergenceError(ExaminerIVError, RuntimeError):
    """Coordinate descent stopped at its sweep cap before meeting the tolerance."""

    def __init__(self, message: str, last_iterate: Any = None, gap: float = float("nan")):
        self.last_iterate = last_iterate
        self.gap = gap
        super().__init__(f"{message} (max coefficient change {gap:.3e})")


class WeakIdentificationError(ExaminerIVError, ArithmeticError):
    """The instrument carries (numerically) no first-stage variation."""

    def __init__(self, denominator: float, context: str = "estimate"):
        self.denominator = float(denominator)
        self.context = context
        super().__init__(
            f"weak identification in {context}: |sum t*gamma| / n = {abs(self.denominator):.3e}"
        )
