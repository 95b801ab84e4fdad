# common/models.py
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator

from config import MC_SAMPLES, QUADRATURE_MAX_DIM, QUADRATURE_ORDER


class ExpectationMethod(str, Enum):
    AUTO = "auto"  # quadrature up to QUADRATURE_MAX_DIM, Monte Carlo above
    QUADRATURE = "quadrature"
    MONTE_CARLO = "monte_carlo"


class DifferentiationMode(str, Enum):
    CLOSED_FORM = "closed_form"
    FINITE_DIFFERENCE = "finite_difference"


class SolverKind(str, Enum):
    CDF_1D = "cdf_1d"
    GAUSSIAN_CLOSED_FORM = "gaussian_closed_form"
    GRID_ENTROPIC = "grid_entropic"


class PolarBackend(str, Enum):
    LINEAR = "linear"
    DISCRETE = "discrete"
    MONOTONE_1D = "monotone_1d"


class DriftEstimator(str, Enum):
    CLOSED_FORM_GAUSSIAN = "closed_form_gaussian"
    GAUSS_HERMITE = "gauss_hermite"
    KERNEL_REGRESSION = "kernel_regression"


class ScenarioKind(str, Enum):
    TRANSPORT_1D = "transport_1d"
    TRANSPORT_GAUSSIAN = "transport_gaussian"
    TRANSPORT_GRID = "transport_grid"
    LINEAR_OPERATOR = "linear_operator"
    POLAR_DISCRETE = "polar_discrete"
    ITO = "ito"


class ReportFormat(str, Enum):
    TABULAR_TEXT = "tabular_text"
    STRUCTURED_RECORDS = "structured_records"


class CheckStatus(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    SKIP = "skip"


def _as_float_array(value, ndim: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"Expected a {ndim}-dimensional array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("Array contains non-finite entries")
    return arr


class GaussianSpace(BaseModel):
    """Standard Gaussian measure on R^n together with its integration settings."""
    dim: int = Field(ge=1)
    quadrature_order: int = Field(default=QUADRATURE_ORDER, ge=2)
    mc_samples: int = Field(default=MC_SAMPLES, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    method: ExpectationMethod = ExpectationMethod.AUTO

    def resolved_method(self, method: Optional[ExpectationMethod] = None) -> ExpectationMethod:
        chosen = ExpectationMethod(method or self.method)
        if chosen == ExpectationMethod.AUTO:
            return ExpectationMethod.QUADRATURE if self.dim <= QUADRATURE_MAX_DIM else ExpectationMethod.MONTE_CARLO
        return chosen

    def with_dim(self, dim: int) -> "GaussianSpace":
        return self.model_copy(update={"dim": dim})


class ExpectationResult(BaseModel):
    value: Any  # float, or ndarray for vector-valued integrands
    stderr: Any = 0.0
    method: ExpectationMethod
    nodes: int

    def __float__(self) -> float:
        return float(self.value)

    class Config:
        arbitrary_types_allowed = True


class ConvexityReport(BaseModel):
    holds: bool
    worst_eigenvalue: float
    worst_point: Optional[List[float]] = None
    best_eigenvalue: Optional[float] = None


class PerturbationOperator(BaseModel):
    """Finite-rank perturbation K of the identity."""
    matrix: np.ndarray

    @field_validator('matrix', mode='before')
    def validate_matrix(cls, value):
        arr = _as_float_array(value)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"Operator matrix must be square, got shape {arr.shape}")
        return arr

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def identity_plus(self) -> np.ndarray:
        return np.eye(self.dim) + self.matrix

    class Config:
        arbitrary_types_allowed = True


class PolarParts(BaseModel):
    """I + K = (I + kbar)(I + a) with kbar symmetric and I + a an isometry."""
    kbar: np.ndarray
    a: np.ndarray

    @field_validator('kbar', 'a', mode='before')
    def validate_square(cls, value):
        arr = _as_float_array(value, ndim=2)
        if arr.shape[0] != arr.shape[1]:
            raise ValueError(f"Polar part must be square, got shape {arr.shape}")
        return arr

    def residuals(self, k: np.ndarray) -> Dict[str, float]:
        n = self.kbar.shape[0]
        eye = np.eye(n)
        return {
            "symmetry": float(np.linalg.norm(self.kbar - self.kbar.T)),
            "isometry": float(np.linalg.norm(self.a + self.a.T + self.a.T @ self.a)),
            "recomposition": float(np.linalg.norm((eye + self.kbar) @ (eye + self.a) - (eye + np.asarray(k)))),
            "min_eigenvalue": float(np.linalg.eigvalsh(0.5 * (self.kbar + self.kbar.T)).min()),
        }

    class Config:
        arbitrary_types_allowed = True


class DiscreteCoupling(BaseModel):
    source_atoms: np.ndarray
    target_atoms: np.ndarray
    source_weights: np.ndarray
    target_weights: np.ndarray
    plan: np.ndarray
    assignment: Optional[np.ndarray] = None  # target index per source atom, when the plan is a permutation
    cost: float

    def marginal_residual(self) -> float:
        rows = np.abs(self.plan.sum(axis=1) - self.source_weights).max()
        cols = np.abs(self.plan.sum(axis=0) - self.target_weights).max()
        return float(max(rows, cols))

    class Config:
        arbitrary_types_allowed = True


class TimeGrid(BaseModel):
    times: np.ndarray

    @field_validator('times', mode='before')
    def validate_times(cls, value):
        arr = _as_float_array(value, ndim=1)
        if arr.size < 2:
            raise ValueError("Time grid needs at least two points")
        if arr[0] != 0.0 or arr[-1] != 1.0:
            raise ValueError(f"Time grid must start at 0 and end at 1, got [{arr[0]}, {arr[-1]}]")
        if np.any(np.diff(arr) <= 0):
            raise ValueError("Time grid must be strictly increasing")
        return arr

    @classmethod
    def uniform(cls, steps: int) -> "TimeGrid":
        if steps < 1:
            raise ValueError(f"Step count must be positive: {steps}")
        times = np.linspace(0.0, 1.0, steps + 1)
        times[-1] = 1.0
        return cls(times=times)

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-12:
            raise ValueError(f"Time {t} is not a grid time")
        return idx

    class Config:
        arbitrary_types_allowed = True


class JacobianReport(BaseModel):
    points: np.ndarray
    lambda_values: np.ndarray
    ma_residuals: Optional[np.ndarray] = None
    det2_log_mean: float
    det2_log_stderr: float = 0.0
    entropy: float
    cost_half: float

    class Config:
        arbitrary_types_allowed = True


class Scenario(BaseModel):
    name: str
    kind: ScenarioKind
    seed: int = Field(ge=0, lt=2**64)
    parameters: Dict[str, Any] = Field(default_factory=dict)
    checks: List[str] = Field(default_factory=list)
    tolerances: Dict[str, float] = Field(default_factory=dict)
    source: Optional[str] = None

    def param(self, key: str, default: Any = None) -> Any:
        return self.parameters.get(key, default)

    class Config:
        use_enum_values = True


class ReportRecord(BaseModel):
    scenario: str
    check: str
    status: CheckStatus
    observed: Optional[float] = None
    expected: Optional[float] = None
    tolerance: Optional[float] = None
    stderr: Optional[float] = None
    detail: str = ""
    wall_time: float = 0.0

    @field_validator('detail', mode='before')
    def validate_detail(cls, value):
        if value is None:
            return ""
        return " ".join(str(value).split())

    class Config:
        use_enum_values = True


class MonotonicityReport(BaseModel):
    holds: bool
    worst_slack: float
    cycles: int


class DualityReport(BaseModel):
    on_graph_max: float
    off_graph_min: float


class InverseReport(BaseModel):
    forward_error: float  # max |S(T(x)) - x| on μ-samples
    backward_error: float  # max |T(S(y)) - y| on ν-samples


class TwoSampleReport(BaseModel):
    statistic: float
    pvalue: float
    passed: bool
    samples: int


class LadderRung(BaseModel):
    dim: int
    smoothing: float
    gradient_error: float
    gradient_error_stderr: float = 0.0
    entropy: float
    cost: float


class BoundRow(BaseModel):
    t: float
    max_density: float
    bound: float
    holds: bool
    entropy_inequality_holds: bool = True


class TalagrandReport(BaseModel):
    holds: bool
    log_det_mean: float  # E[log det₂(I + ∇²φ)], at most 0
    distance_sq: float
    entropy_bound: float  # 2 E[L log L]
    stderr: float = 0.0


class PathwiseComparison(BaseModel):
    """Two per-path evaluations of the same random variable and their relative disagreement."""
    reconstructed: np.ndarray
    direct: np.ndarray
    max_relative_error: float
    median_relative_error: float
    mean_reconstructed: float
    mean_stderr: float

    class Config:
        arbitrary_types_allowed = True


class DriftBin(BaseModel):
    t: float
    center: float
    count: int
    estimate: float  # (1/h) E[T_{t+h} - T_t | bin]
    oracle: float  # bin mean of the time-averaged oracle drift
    stderr: float
    z: float


class DecompositionReport(BaseModel):
    bins: List[DriftBin]
    max_abs_z: float
    quadratic_variation: float
    qv_band: float
    adaptedness_residual: float
    adaptedness_gated: bool = True
    passed: bool


class RotationReport(BaseModel):
    ks: Any  # TwoSampleReport of the rotated anchors under ν
    x_anchor_variance: float  # ν-weighted variance of X at the last anchor
    rotated_anchor_variance: float
    residual_failure_rate: float  # per-path chi-square rejection rate of the B^T increments
    residual_band: float
    residual_lag_z: float  # lag-one autocorrelation of the B^T increments, in standard errors
    optimal_cost: float
    alternative_costs: List[float]
    min_margin: float
    passed: bool


class RefinementReport(BaseModel):
    steps: List[int]
    density_errors: List[float]
    jacobian_errors: List[float]
    density_ratio: float
    jacobian_ratio: float
    slope: float


class CheckOutcome(BaseModel):
    """Verdict of one check before it is stamped with the scenario name and timing."""
    passed: bool
    observed: Optional[float] = None
    expected: Optional[float] = None
    tolerance: Optional[float] = None
    stderr: Optional[float] = None
    detail: str = ""
