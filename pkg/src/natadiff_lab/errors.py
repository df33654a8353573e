"""Exception types raised across the package."""


class NatadiffError(Exception):
    """Base class for all package errors."""


class ScheduleError(NatadiffError, ValueError):
    """Invalid schedule table, time index, or time ordering."""


class ConditioningError(NatadiffError, ValueError):
    """A conditioning set selects no mixture component."""


class UndefinedScoreError(NatadiffError, ValueError):
    """Score requested where the noised density has no gradient (t = 0 Dirac limit)."""


class LookupTokenError(NatadiffError, KeyError):
    """Conditioning token missing from a denoiser's embedding table."""


class BackwardStateError(NatadiffError, RuntimeError):
    """Backward pass requested without a recorded forward pass."""


class TrainingError(NatadiffError, RuntimeError):
    """Training produced a non-finite loss."""


class DegenerateGradientError(NatadiffError, ArithmeticError):
    """Adversarial gradient norm too small to normalise."""


class TargetError(NatadiffError, ValueError):
    """Adversarial target missing, equal to the true class, or unresolvable."""


class UndefinedRateError(NatadiffError, ZeroDivisionError):
    """Rate with an empty denominator."""


class ConfigError(NatadiffError, ValueError):
    """Malformed or inconsistent configuration."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column or 1})"
        super().__init__(message)
