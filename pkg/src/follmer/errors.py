"""Exception hierarchy shared across the package."""


class FollmerError(Exception):
    """Base class for all package errors."""


class DomainError(FollmerError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ScheduleError(FollmerError):
    """A schedule violates its structural conditions or is evaluated badly."""


class EvaluationError(FollmerError):
    """A schedule or target function returned a non-finite value."""


class MonotonicityError(FollmerError):
    """The noise-level map t -> sqrt(t) sigma_t / beta_t is not monotone."""

    def __init__(self, message, interval=None):
        super().__init__(message)
        self.interval = interval


class DegenerateReferenceError(FollmerError):
    """The reference process has zero accumulated noise (eps <= tolerance)."""


class TargetError(FollmerError):
    """A target distribution is malformed or an oracle is unavailable."""


class InvalidDiffusionError(FollmerError):
    """A diffusion coefficient g fails the drift-tuning boundary conditions."""

    def __init__(self, message, which_limit=None):
        super().__init__(message)
        self.which_limit = which_limit


class SimulationDivergenceError(FollmerError):
    """A simulated path became non-finite."""

    def __init__(self, message, path_index=None, t=None):
        super().__init__(message)
        self.path_index = path_index
        self.t = t


class FittingError(FollmerError):
    """Regression fitting failed or was called outside its contract."""


class TruncationError(FollmerError):
    """A truncated integral's declared tail exceeds the allowed fraction."""


class BoundUnavailableError(FollmerError):
    """No Lipschitz bound is available for the requested regime."""


class ConfigError(FollmerError):
    """An experiment configuration is invalid."""
