"""Exception hierarchy shared by every stage of the simulator."""


class ESLEError(Exception):
    """Base class for all simulator errors."""


class DomainError(ESLEError, ValueError):
    """An argument lies outside the domain where a quantity is defined."""


class QuadratureError(ESLEError, ArithmeticError):
    """Frequency quadrature failed to converge to the requested tolerance."""

    def __init__(self, message, *, location=None, estimate=None, tolerance=None):
        super().__init__(message)
        self.location = location
        self.estimate = estimate
        self.tolerance = tolerance


class FactorizationError(ESLEError, ArithmeticError):
    """A sampled kernel is too far from positive semidefinite to factorize."""

    def __init__(self, message, *, most_negative=None, max_bin=None):
        super().__init__(message)
        self.most_negative = most_negative
        self.max_bin = max_bin


class ConfigError(ESLEError, ValueError):
    """Invalid, incomplete or mutually inconsistent configuration."""


class InsufficientDataError(ESLEError, ValueError):
    """Too few samples to form the requested estimate."""


class TrajectoryDiverged(ESLEError, ArithmeticError):
    """A stochastic trajectory produced a non-finite or runaway matrix."""

    def __init__(self, message, *, step):
        super().__init__(message)
        self.step = step


class EnsembleError(ESLEError, RuntimeError):
    """The ensemble as a whole could not produce a usable average."""


class CheckpointError(ESLEError, IOError):
    """A checkpoint is unreadable or belongs to a different configuration."""
