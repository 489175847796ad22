"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 2, NumericalError -> 3,
ValidationError -> 4.
"""


class MperturbError(Exception):
    """Base class for package errors."""


class ConfigError(MperturbError, ValueError):
    """Invalid configuration or violated cross-field constraint."""


class GeometryError(MperturbError, ValueError):
    """Mask/grid mismatch or unrepresentable domain."""


class NumericalError(MperturbError, RuntimeError):
    """A numerical procedure failed (non-convergence, degeneracy, ...)."""


class ConvergenceError(NumericalError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class HyperbolicityError(NumericalError):
    """Spectrum touches the imaginary axis within tolerance."""


class DefectiveEigenvalueError(NumericalError):
    def __init__(self, value):
        super().__init__(f"eigenvalue {value:.6g} appears defective (<l, r> ~ 0)")
        self.value = value


class InfeasibleParametersError(NumericalError):
    """Cone / dichotomy parameter constraints cannot be met."""


class CoverageError(NumericalError):
    """Graph-transform image fails to cover the X+ mesh."""


class ValidationError(MperturbError):
    """One or more invariant checks failed."""
