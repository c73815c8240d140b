"""Exception taxonomy shared across the package."""


class FiberDialysisError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FiberDialysisError):
    """Invalid geometry, resolution, profile or other build-time input."""


class UsageError(FiberDialysisError):
    """A caller violated an API precondition (bad tag, bad argument)."""


class AssemblyError(FiberDialysisError):
    """Sparse-matrix assembly received out-of-range or malformed entries."""


class SolverError(FiberDialysisError):
    """Linear solve failed or produced an unacceptable residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NewtonError(FiberDialysisError):
    """Newton iteration failed; carries the error trace accumulated so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class CalibrationError(FiberDialysisError):
    """Hydraulic calibration target outside the achievable range."""

    def __init__(self, message, achievable_range=None):
        super().__init__(message)
        self.achievable_range = achievable_range
