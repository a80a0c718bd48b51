"""Exception hierarchy shared by all modules."""


class CocycleLabError(Exception):
    """Base class for every error raised by cocycle_lab."""


class ConfigError(CocycleLabError, ValueError):
    """Invalid parameters, family/spec mismatch or malformed run config."""


class DomainError(CocycleLabError, ValueError):
    """A point or strip width outside the analyticity domain."""


class BranchError(CocycleLabError, ArithmeticError):
    """Principal logarithm requested too close to the negative real axis."""


class ConditioningError(CocycleLabError, ArithmeticError):
    """A linear solve or conjugation is too ill-conditioned to trust."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class DegenerateHoppingError(CocycleLabError, ValueError):
    """The leading hopping coefficient vanishes."""


class IterationError(CocycleLabError, ArithmeticError):
    """Overflow or non-finite values during cocycle iteration."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NumericalError(CocycleLabError, ArithmeticError):
    """Generic numerical failure (eigensolver, root finder)."""


class InsufficientResolutionError(CocycleLabError, ValueError):
    """Too few usable scales or samples for a fit."""


class DivergenceError(CocycleLabError, ArithmeticError):
    """A fixed-point or KAM iteration failed to contract."""


class DataError(CocycleLabError, ValueError):
    """Inconsistent input data (e.g. resonance cycles that do not close)."""


class StateError(CocycleLabError, RuntimeError):
    """Operation invoked on a state that does not satisfy its precondition."""
