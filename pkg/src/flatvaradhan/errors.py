"""Exception hierarchy shared by every module."""


class VaradhanError(Exception):
    """Base class for library errors."""


class InvalidInputError(VaradhanError, ValueError):
    """Argument outside the documented domain (dimension, time, radius...)."""


class CutLocusError(VaradhanError, ValueError):
    """Logarithm requested for a point on (or within tolerance of) the cut locus."""


class UnsupportedOperationError(VaradhanError):
    """Operation not defined for the given arguments, e.g. a t=0 Hessian."""


class NumericalError(VaradhanError, ArithmeticError):
    """Non-finite values or failed numerical routine."""


class HypothesisViolation(VaradhanError):
    """A theorem hypothesis failed: flat function, non-unique mean or non-PD Hessian."""
