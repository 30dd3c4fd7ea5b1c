"""Exception hierarchy shared by every spikegrid module."""


class SpikegridError(Exception):
    """Base class for all errors raised by spikegrid."""


class ShapeError(SpikegridError, ValueError):
    pass


class DomainError(SpikegridError, ValueError):
    pass


class ConvergenceError(SpikegridError, RuntimeError):
    pass


class NonFiniteError(SpikegridError, FloatingPointError):
    pass


class ConfigError(SpikegridError, ValueError):
    pass


class DataError(SpikegridError, ValueError):
    pass


class TrainingError(SpikegridError, RuntimeError):
    """Raised when an optimisation step cannot proceed (e.g. NaN gradients)."""

    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter
