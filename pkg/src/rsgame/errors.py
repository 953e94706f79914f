"""Exception hierarchy.

``ModelValidationError`` subclasses signal bad inputs (CLI exit code 2);
everything else deriving from ``RSGameError`` is a runtime failure.
"""


class RSGameError(Exception):
    pass


class ModelValidationError(RSGameError, ValueError):
    pass


# chain
class NegativeOffDiagonal(ModelValidationError):
    pass


class RowSumViolation(ModelValidationError):
    pass


class DominatingRateNotFound(RSGameError):
    pass


class GridTooCoarse(RSGameError):
    pass


class GridTooCoarseWarning(UserWarning):
    pass


# kolmogorov
class TimeOrderViolation(ModelValidationError):
    pass


class InvalidDistribution(ModelValidationError):
    pass


class NonFiniteBlowup(RSGameError):
    pass


# jumpdiff
class StepTooLarge(ModelValidationError):
    pass


class NonFiniteState(RSGameError):
    pass


class NonFinitePayoff(RSGameError):
    pass


class InadmissibleControl(RSGameError):
    pass


# bancassurance
class InfeasibleLambda1(ModelValidationError):
    pass


class InfeasibleLambda2(ModelValidationError):
    pass


class UnsupportedKappa(ModelValidationError):
    pass


class NonpositiveX2(RSGameError):
    pass


# smp
class DomainError(RSGameError):
    pass


# lagrange
class BackendUnavailable(RSGameError):
    pass


class NoSignChange(RSGameError):
    pass


class MaxIterations(RSGameError):
    pass


class ConfigError(ModelValidationError):
    pass
