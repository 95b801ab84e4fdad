"""
Monotone rearrangement in one dimension.

T = F_ν⁻¹∘Φ is tabulated through the target CDF. Both tails are inverted in
log-probability space so that relative accuracy survives far from the median.
"""
import logging
from typing import Optional, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import PchipInterpolator
from scipy.special import ndtri_exp
from scipy.stats import norm

from common.errors import DimensionMismatchError, NonFiniteValueError, UnnormalizedDensityError
from common.models import GaussianSpace, SolverKind
from config import CDF_TABLE_POINTS, CDF_TABLE_RADIUS, NORMALIZATION_TOL
from transport.gauss_core import DensitySpec, ScalarField, expect, log_gamma
from transport.solution import TransportSolution, backward_potential, batch_map

logger = logging.getLogger(__name__)


def _increasing(keys: np.ndarray, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Drop plateau entries of a nondecreasing key sequence."""
    keep = np.concatenate([[True], np.diff(keys) > 0])
    return keys[keep], values[keep]


class QuantileTable:
    """Target CDF tabulated on [-radius, radius] with log-space inversion in both tails."""

    def __init__(self, L: DensitySpec, radius: float, points: int):
        y = np.linspace(-radius, radius, points)
        with np.errstate(over='ignore', invalid='ignore'):
            log_q = L.log_density(y[:, None]) + log_gamma(y[:, None])
        q = np.exp(log_q)
        if np.any(np.isnan(q)) or np.any(np.isinf(q)):
            bad = int(np.argwhere(~np.isfinite(q))[0][0])
            raise NonFiniteValueError(f"Target density is not finite at y={y[bad]:.6g}", node=y[bad])
        lower = cumulative_trapezoid(q, y, initial=0.0)
        total = lower[-1]
        if not np.isfinite(total) or total <= 0:
            raise UnnormalizedDensityError(f"Target density of {L.name} is not integrable on the table")
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise UnnormalizedDensityError(
                f"Target mass on [-{radius}, {radius}] is {total:.6f}; expected 1 within {NORMALIZATION_TOL}"
            )
        upper = -cumulative_trapezoid(q[::-1], y[::-1], initial=0.0)[::-1]
        lower = lower / total
        upper = upper / total

        self.y = y
        self.log_q = log_q - np.log(total)
        self.clamped = 0

        pos = lower > 0
        keys, vals = _increasing(np.log(lower[pos]), y[pos])
        self._lower_inverse = PchipInterpolator(keys, vals, extrapolate=False)
        self._lower_range = (keys[0], keys[-1])
        self._log_cdf = PchipInterpolator(vals, keys, extrapolate=False)

        pos = upper > 0
        # log survival decreases in y; flip to make it an increasing key
        keys, vals = _increasing(np.log(upper[pos])[::-1], y[pos][::-1])
        self._upper_inverse = PchipInterpolator(keys, vals, extrapolate=False)
        self._upper_range = (keys[0], keys[-1])
        self._log_sf = PchipInterpolator(vals[::-1], keys[::-1], extrapolate=False)

    def _clip(self, keys: np.ndarray, bounds: Tuple[float, float]) -> np.ndarray:
        outside = (keys < bounds[0]) | (keys > bounds[1])
        self.clamped += int(outside.sum())
        return np.clip(keys, bounds[0], bounds[1])

    def quantile_of_normal(self, x: np.ndarray) -> np.ndarray:
        """F_ν⁻¹(Φ(x))."""
        out = np.empty_like(x)
        left = x <= 0
        out[left] = self._lower_inverse(self._clip(norm.logcdf(x[left]), self._lower_range))
        out[~left] = self._upper_inverse(self._clip(norm.logsf(x[~left]), self._upper_range))
        return out

    def normal_of_quantile(self, y: np.ndarray) -> np.ndarray:
        """Φ⁻¹(F_ν(y)), clamped to the tabulated support."""
        y = np.clip(y, self.y[0], self.y[-1])
        log_cdf = self._log_cdf(np.clip(y, self._log_cdf.x[0], self._log_cdf.x[-1]))
        log_sf = self._log_sf(np.clip(y, self._log_sf.x[0], self._log_sf.x[-1]))
        use_lower = log_cdf <= np.log(0.5)
        with np.errstate(invalid='ignore'):
            out = np.where(use_lower, ndtri_exp(np.minimum(log_cdf, 0.0)), -ndtri_exp(np.minimum(log_sf, 0.0)))
        return out


def solve_1d(L: DensitySpec, radius: float = CDF_TABLE_RADIUS, points: int = CDF_TABLE_POINTS,
             space: Optional[GaussianSpace] = None, potential_points: int = 4001) -> TransportSolution:
    """Optimal map of N(0,1) onto L·μ by monotone rearrangement.

    Args:
        L: One-dimensional target density
        radius: Half-width of the CDF table
        points: Number of table points
        space: Gaussian space used for the transport cost
        potential_points: Grid size for integrating T − id into φ

    Returns:
        TransportSolution: with T' = γ/(q∘T) used for the potential's Hessian
    """
    if L.dim != 1:
        raise DimensionMismatchError(f"solve_1d needs a one-dimensional density, got dim={L.dim}")
    logger.info(f"Solving 1D transport onto {L.name} (table {points} points on ±{radius})")
    table = QuantileTable(L, radius, points)

    def forward(x):
        return table.quantile_of_normal(x[:, 0])[:, None]

    def inverse(y):
        return table.normal_of_quantile(y[:, 0])[:, None]

    def forward_slope(x):
        # differentiating F_ν(T(x)) = Φ(x) gives q(T(x)) T'(x) = γ(x)
        t = table.quantile_of_normal(x[:, 0])
        with np.errstate(over='ignore', divide='ignore'):
            log_q_t = L.log_density(t[:, None]) + log_gamma(t[:, None])
        return np.exp(log_gamma(x) - log_q_t)

    xg = np.linspace(-radius, radius, potential_points)
    displacement = table.quantile_of_normal(xg) - xg
    antiderivative = PchipInterpolator(xg, displacement).antiderivative()
    offset = float(antiderivative(0.0))

    phi = ScalarField(
        1,
        value=lambda x: antiderivative(x[:, 0]) - offset,
        grad=lambda x: forward(x) - x,
        hess=lambda x: (forward_slope(x) - 1.0)[:, None, None],
        name=f"phi_1d[{L.name}]",
    )

    def inverse_hessian(y):
        return (1.0 / forward_slope(inverse(y)))[:, None, None]

    psi = backward_potential(phi, inverse, inverse_hessian)

    space = space or GaussianSpace(dim=1)
    cost = expect(lambda x: np.sum((forward(x) - x) ** 2, axis=1), space, label="cdf_cost")
    if table.clamped:
        logger.warning(f"{table.clamped} CDF inversions clamped to the table range while solving onto {L.name}")
    logger.info(f"1D transport onto {L.name}: cost={cost.value:.6g}")
    return TransportSolution(
        phi, psi, batch_map(1, forward, "T"), batch_map(1, inverse, "S"), cost.value, SolverKind.CDF_1D,
        target=L, diagnostics={"clamped": table.clamped, "table_points": points, "cost_stderr": cost.stderr},
    )
