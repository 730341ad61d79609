"""Exception hierarchy shared by every module."""


class PlanePoseError(Exception):
    """Base class for all package errors."""


class InvalidInputError(PlanePoseError, ValueError):
    pass


class SingularInputError(InvalidInputError):
    """Raised when a raw 3x3 block cannot be projected onto SO(3)."""


class DegeneratePlaneError(InvalidInputError):
    """Raised when the three reference points of a pose are collinear."""


class ShapeError(PlanePoseError, ValueError):
    pass


class ConfigError(PlanePoseError, ValueError):
    pass


class InvalidVarianceError(InvalidInputError):
    pass


class InvalidEvidenceError(InvalidInputError):
    pass


class EnsembleMismatchError(PlanePoseError, ValueError):
    pass


class NumericError(PlanePoseError, ArithmeticError):
    """Non-finite values appeared during training or inference."""
