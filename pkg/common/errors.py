# common/errors.py
"""Exception types raised by the transport laboratory."""
from typing import List, Optional


class LabError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatchError(LabError, ValueError):
    pass


class NonFiniteValueError(LabError, ValueError):
    """An integrand or field produced NaN or inf at a specific node."""

    def __init__(self, message: str, node=None):
        super().__init__(message)
        self.node = node


class QuadratureOverflowError(NonFiniteValueError):
    pass


class UnnormalizedDensityError(LabError, ValueError):
    pass


class OperatorNotInvertibleError(LabError, ValueError):
    def __init__(self, message: str = "operator not invertible", smallest_singular_value: Optional[float] = None):
        super().__init__(message)
        self.smallest_singular_value = smallest_singular_value


class NotPositiveDefiniteError(LabError, ValueError):
    pass


class MapNotMonotoneError(LabError, ValueError):
    def __init__(self, point, eigenvalue: float):
        super().__init__(f"map not monotone at x={point!r} (Hessian eigenvalue {eigenvalue:.6g} <= -1)")
        self.point = point
        self.eigenvalue = eigenvalue


class SinkhornConvergenceError(LabError, RuntimeError):
    def __init__(self, residual: float, iterations: int, epsilon: float):
        super().__init__(
            f"Sinkhorn did not converge at epsilon={epsilon:.3g} after {iterations} iterations "
            f"(marginal residual {residual:.3e})"
        )
        self.residual = residual
        self.iterations = iterations
        self.epsilon = epsilon


class InsufficientSamplesError(LabError, ValueError):
    pass


class HypothesisError(LabError, ValueError):
    """A hypothesis required by the requested check does not hold."""


class InternalConsistencyError(LabError, RuntimeError):
    pass


class ScenarioValidationError(LabError, ValueError):
    def __init__(self, path: str, errors: List[str]):
        self.path = path
        self.errors = list(errors)
        joined = "; ".join(self.errors)
        super().__init__(f"{path}: {len(self.errors)} validation error(s): {joined}")


class ReportWriteError(LabError, OSError):
    pass


class CheckSkipped(LabError):
    """A check does not apply to the scenario; the message is the skip reason."""
