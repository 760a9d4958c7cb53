"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An input violates a precondition (shape, finiteness, range)."""


class ConfigurationError(ValueError):
    """A configuration is internally inconsistent or infeasible."""


class ConstraintInfeasibleError(RuntimeError):
    """The augmented-Lagrangian solve did not reach the acyclicity target.

    Carries the best iterate seen and its acyclicity value so callers can
    decide whether to keep it.
    """

    def __init__(self, message, best_weights=None, best_h=float("inf")):
        super().__init__(message)
        self.best_weights = best_weights
        self.best_h = best_h
