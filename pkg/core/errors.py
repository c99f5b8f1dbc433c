# core/errors.py
"""
Error hierarchy for mudicho

Every error names the invariant or condition it reports and carries the exit
code the command line maps it to:
- ValidationError family -> exit 2 (bad input, violated preconditions)
- NumericalError family  -> exit 3 (non-convergence, ill-conditioning, windows)
"""

from typing import Any, Dict, Optional

import numpy as np

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _plain(value: Any) -> Any:
    """Convert numpy scalars/arrays inside error details to JSON-friendly values"""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


class MudichoError(Exception):
    """Base class for all library errors"""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, condition: Optional[str] = None, **details: Any):
        super().__init__(message)
        self.message = message
        self.condition = condition
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "message": self.message,
            "condition": self.condition,
            "details": _plain(self.details),
            "exit_code": self.exit_code,
        }


class ValidationError(MudichoError, ValueError):
    exit_code = EXIT_VALIDATION


class ConfigurationError(ValidationError):
    pass


class InvalidGrowthRateError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class SchemaError(ValidationError):
    def __init__(self, message: str, field: str, **details: Any):
        super().__init__(message, condition="system-spec schema", field=field, **details)
        self.field = field


class ParseError(ValidationError):
    """Lexical or syntax error in an expression, positioned by byte offset"""

    def __init__(self, message: str, offset: int, expected: Optional[str] = None,
                 source: Optional[str] = None):
        detail = f"{message} at offset {offset}"
        if expected:
            detail += f" (expected {expected})"
        super().__init__(detail, condition="expression grammar",
                         offset=offset, expected=expected, source=source)
        self.offset = offset
        self.expected = expected


class NotHyperbolicError(ValidationError):
    pass


class NumericalError(MudichoError, RuntimeError):
    exit_code = EXIT_NUMERICAL


class IllConditionedError(NumericalError):
    def __init__(self, message: str, index: int, condition: str = "cond(A_n) < cond_cap", **details: Any):
        super().__init__(message, condition=condition, index=index, **details)
        self.index = index


class ContractionFailure(NumericalError):
    def __init__(self, message: str, index: Optional[int], residual: float, **details: Any):
        super().__init__(message, condition="contraction converges within max_iters",
                         index=index, residual=residual, **details)
        self.index = index
        self.residual = residual


class GapNotResolvedError(NumericalError):
    pass


class WindowError(NumericalError):
    def __init__(self, message: str, required_window: Optional[int] = None,
                 condition: str = "window covers the requested indices", **details: Any):
        super().__init__(message, condition=condition,
                         required_window=required_window, **details)
        self.required_window = required_window


class DichotomyTooWeakError(NumericalError):
    def __init__(self, message: str, index: int, condition: str = "conjugacy series is summable",
                 **details: Any):
        super().__init__(message, condition=condition, index=index, **details)
        self.index = index


__all__ = [
    "EXIT_OK", "EXIT_VALIDATION", "EXIT_NUMERICAL",
    "MudichoError", "ValidationError", "ConfigurationError", "InvalidGrowthRateError",
    "DomainError", "SchemaError", "ParseError", "NotHyperbolicError",
    "NumericalError", "IllConditionedError", "ContractionFailure",
    "GapNotResolvedError", "WindowError", "DichotomyTooWeakError",
]
