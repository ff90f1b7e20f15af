"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A parameter lies outside its admissible domain."""


class DomainError(ValueError):
    """An operation was applied at a node where it is undefined."""


class SingularityError(ArithmeticError):
    """A singular weight was evaluated at t = 0 or t = T."""


class SolverError(RuntimeError):
    """The time-step matrix could not be factored or solved accurately."""

    def __init__(self, message, condition_estimate=None):
        super().__init__(message)
        self.condition_estimate = condition_estimate


class NumericError(ArithmeticError):
    """Non-finite values appeared in a field."""


class HypothesisViolation(ValueError):
    """Problem data violate one of the structural hypotheses H1-H5."""


class SamplingError(RuntimeError):
    """No admissible sample could be drawn."""
