"""Exception types raised across the package."""


class TwistSMCError(Exception):
    """Base class for all package errors."""


class HorizonExceeded(TwistSMCError):
    pass


class BadConfig(TwistSMCError):
    pass


class BadStep(TwistSMCError):
    pass


class BadInput(TwistSMCError):
    pass


class Unsupported(TwistSMCError):
    pass


class Exhausted(TwistSMCError):
    pass


class MissingObservation(TwistSMCError):
    pass


class DegenerateWeights(TwistSMCError):
    pass


class TooLarge(TwistSMCError):
    pass


class BadParameterization(TwistSMCError):
    pass


class TrainingDiverged(TwistSMCError):
    """Raised when a loss becomes non-finite; carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
