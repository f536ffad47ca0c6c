"""Exceptions raised across the laboratory. The CLI turns any AmpLabError into a one-line exit message."""


class AmpLabError(Exception):
    pass


class ContractViolation(AmpLabError, ValueError):
    pass


class InvalidActionError(ContractViolation):
    """
    An action that is not feasible in the state it was applied to.
    location is the MQN step index or the ride-hail (t, i) pair when known.
    """

    def __init__(self, message, location=None):
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)
        self.location = location


class IntractableExpectationError(AmpLabError):
    pass


class ValueFitDivergence(AmpLabError, FloatingPointError):

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration


class ReducibleChainError(AmpLabError):

    def __init__(self, unreachable):
        self.unreachable = list(unreachable)
        shown = ", ".join(str(s) for s in self.unreachable[:10])
        more = "" if len(self.unreachable) <= 10 else f" (+{len(self.unreachable) - 10} more)"
        super().__init__(f"induced chain is reducible; states that never reach the empty state: {shown}{more}")


class ConvergenceError(AmpLabError):

    def __init__(self, message, span=None):
        super().__init__(message)
        self.span = span


class ConfigError(AmpLabError, ValueError):

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class ResidualError(AmpLabError):
    """A linear solve whose solution does not satisfy its own equation to tolerance."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual
