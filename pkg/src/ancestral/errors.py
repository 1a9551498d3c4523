"""Exception hierarchy shared by every module."""


class AncestralError(Exception):
    """Base class for all package errors."""


class ConfigInvalid(AncestralError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class AssumptionViolation(AncestralError):
    """A standing model assumption fails for the supplied parameters."""


class DoubleStochasticityViolation(AncestralError):
    pass


class MassLeak(AncestralError):
    pass


class MissingCertificate(AncestralError):
    pass


class NumericalFailure(AncestralError):
    """Base for failures mapped to CLI exit code 3."""


class StabilityViolation(NumericalFailure):
    pass


class Divergence(NumericalFailure):
    pass


class NonPositiveLambda(NumericalFailure):
    pass


class NoConvergence(NumericalFailure):
    pass


class ComplexDominant(NumericalFailure):
    pass


class Explosion(NumericalFailure):
    pass


class EmptyInitial(AncestralError):
    pass


class UnknownId(AncestralError, KeyError):
    pass


class NotAlive(AncestralError):
    pass


class Extinct(AncestralError):
    pass


class AcceptanceTooLow(NumericalFailure):
    pass


class FloorExit(NumericalFailure):
    pass


class StatisticalFailure(AncestralError):
    """Base for failures mapped to CLI exit code 4."""


class TooFewSurvivors(StatisticalFailure):
    pass
