"""
Exception types raised across the lab.

Every error derives from LabError so the CLI can map solver failures to a
single exit status, and from the builtin a caller would naturally catch.
"""


class LabError(Exception):
    """Base class for all lab errors."""


class DomainError(LabError, ValueError):
    pass


class PathSizeError(LabError, ValueError):
    pass


class AlignmentError(LabError, ValueError):
    pass


class InsufficientPathError(LabError, ValueError):
    pass


class InputError(LabError, ValueError):
    pass


class GeneratorError(LabError, ArithmeticError):
    pass


class ContractionError(LabError, ArithmeticError):
    pass


class NonConvergenceError(LabError, ArithmeticError):
    pass


class OracleError(LabError, ArithmeticError):
    pass


class RankError(LabError, ArithmeticError):
    pass


class ConfigValidationError(LabError, ValueError):
    """Malformed experiment config. `field` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class PicardNonConvergenceWarning(UserWarning):
    pass
