"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` (and subclasses) to exit status 1 and
:class:`NumericalError` (and subclasses) to exit status 2.
"""


class GWCError(Exception):
    """Base class for all errors raised by the package."""


class ValidationError(GWCError, ValueError):
    """Input failed validation. ``problems`` lists every failing field."""

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems) if problems else [message]


class DomainError(ValidationError):
    """Argument outside the domain where the value can be certified."""


class PreconditionViolation(ValidationError):
    pass


class NonMonotone(PreconditionViolation):
    """Inverse requested for a map that is not strictly increasing from 0."""


class CriticalCase(PreconditionViolation):
    """Closed-form variance is singular at m = 1."""


class InexactInput(PreconditionViolation):
    pass


class ProxyTooClose(PreconditionViolation):
    pass


class UnderpoweredCondition(PreconditionViolation):
    pass


class ResourceBudget(ValidationError):
    pass


class DegreeOverflow(ResourceBudget):
    pass


class IndexOutOfRange(GWCError, IndexError):
    pass


class NumericalError(GWCError, ArithmeticError):
    pass


class NonConvergence(NumericalError):
    def __init__(self, message, last_gap=None):
        super().__init__(message)
        self.last_gap = last_gap


class MonotonicityViolation(NumericalError):
    pass


class DivergenceSuspected(NumericalError):
    pass


class Overflow(NumericalError, OverflowError):
    pass
