"""Exception hierarchy shared by all modules."""


class EnkbfLabError(Exception):
    """Base class for errors raised by enkbf_lab."""


class ValidationError(EnkbfLabError, ValueError):
    """Invalid user input (shapes, configuration, arguments)."""


class InvalidDimension(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class PathTooDeep(ValidationError):
    pass


class LevelAboveFine(ValidationError):
    pass


class TooFewParticles(ValidationError):
    pass


class InvalidAlpha(ValidationError):
    pass


class ConfigInvalid(ValidationError):
    pass


class InsufficientReplicates(ValidationError):
    pass


class NumericalBlowUp(EnkbfLabError, ArithmeticError):
    """A state norm exceeded the blow-up threshold (or became non-finite)."""


class EstimatorFailure(NumericalBlowUp):
    """Too many replicates of an estimator blew up."""
