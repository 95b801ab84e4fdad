"""
Entropic transport between the discretized Gaussian and a discretized target.

Log-domain Sinkhorn iterations with ε-annealing and warm starts, followed by
barycentric projection of the plan. The potential is recovered by integrating
T − id along the coordinate axes.
"""
import itertools
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import RegularGridInterpolator
from scipy.signal import savgol_filter
from scipy.special import logsumexp

from common.errors import DimensionMismatchError, SinkhornConvergenceError
from common.models import DiscreteCoupling, SolverKind
from config import SINKHORN_MAX_ITER, SINKHORN_TOL
from transport.gauss_core import DensitySpec, ScalarField, log_gamma
from transport.solution import TransportSolution, backward_potential, batch_map

logger = logging.getLogger(__name__)

MIN_GRID_BOUND = 6.0
CHECK_EVERY = 10
STAGE_TOL = 1e-4


def default_schedule(cell_volume: float, start: float = 1.0, factor: float = 0.5) -> List[float]:
    """Geometric ε schedule ending at 1e-3 times the cell volume."""
    end = 1e-3 * cell_volume
    schedule = [start]
    while schedule[-1] * factor > end:
        schedule.append(schedule[-1] * factor)
    schedule.append(end)
    return schedule


def _target_weights(L: DensitySpec, points: np.ndarray, h: float) -> np.ndarray:
    log_w = log_gamma(points)
    if L.support is not None:
        # cell-averaged indicator mollifies the sharp edge
        lower, upper = L.support
        overlap = (np.minimum(upper, points + 0.5 * h) - np.maximum(lower, points - 0.5 * h)) / h
        weights = np.exp(log_w) * np.prod(np.clip(overlap, 0.0, 1.0), axis=1)
    else:
        with np.errstate(over='ignore'):
            weights = np.exp(log_w + L.log_density(points))
    return weights / weights.sum()


def sinkhorn_log(a: np.ndarray, b: np.ndarray, cost: np.ndarray, schedule: Sequence[float],
                 max_iter: int = SINKHORN_MAX_ITER, tol: float = SINKHORN_TOL) -> Tuple[np.ndarray, dict]:
    """Log-domain Sinkhorn with ε-annealing.

    Args:
        a: Source weights (N,)
        b: Target weights (M,)
        cost: Cost matrix (N, M)
        schedule: Decreasing regularization strengths
        max_iter: Iteration cap per stage
        tol: Marginal residual tolerance (max abs row error after the column update)

    Returns:
        Tuple of the transport plan and a diagnostics dict
    """
    with np.errstate(divide='ignore'):
        log_a = np.log(a)
        log_b = np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    total_iterations = 0
    residual = np.inf
    for stage, eps in enumerate(schedule):
        # warm-start stages only need to land near the next stage's basin
        stage_tol = tol if stage == len(schedule) - 1 else max(tol, STAGE_TOL)
        for it in range(1, max_iter + 1):
            f = -eps * logsumexp(log_b[None, :] + (g[None, :] - cost) / eps, axis=1)
            g = -eps * logsumexp(log_a[:, None] + (f[:, None] - cost) / eps, axis=0)
            if it % CHECK_EVERY == 0:
                log_plan = log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - cost) / eps
                residual = float(np.abs(np.exp(logsumexp(log_plan, axis=1)) - a).max())
                if residual < stage_tol:
                    break
        else:
            raise SinkhornConvergenceError(residual, max_iter, eps)
        total_iterations += it
        logger.debug(f"Sinkhorn stage eps={eps:.3g}: {it} iterations, residual {residual:.2e}")
    eps = schedule[-1]
    plan = np.exp(log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - cost) / eps)
    return plan, {"iterations": total_iterations, "residual": residual, "epsilon": eps}


class _GridField:
    """Interpolates values tabulated on a regular grid (1D or 2D) at arbitrary points."""

    def __init__(self, axis: np.ndarray, dim: int, values: np.ndarray):
        self.interp = RegularGridInterpolator([axis] * dim, values, method='linear',
                                              bounds_error=False, fill_value=None)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.interp(x)


def _axis_derivatives(field: np.ndarray, h: float, dim: int, window: int) -> List[np.ndarray]:
    """Savitzky-Golay derivative of a gridded array along each axis."""
    return [savgol_filter(field, window, 2, deriv=1, delta=h, axis=j, mode='interp') for j in range(dim)]


def _integrate_potential(axis: np.ndarray, displacement: np.ndarray, dim: int) -> np.ndarray:
    center = int(np.argmin(np.abs(axis)))
    if dim == 1:
        phi = cumulative_trapezoid(displacement[..., 0], axis, initial=0.0)
        return phi - phi[center]
    along_first = cumulative_trapezoid(displacement[:, center, 0], axis, initial=0.0)
    along_second = cumulative_trapezoid(displacement[:, :, 1], axis, axis=1, initial=0.0)
    along_second = along_second - along_second[:, center:center + 1]
    return (along_first - along_first[center])[:, None] + along_second


def solve_grid_entropic(L: DensitySpec, bound: float = 6.0, resolution: int = 61,
                        epsilon_schedule: Optional[Sequence[float]] = None,
                        max_iter: int = SINKHORN_MAX_ITER, tol: float = SINKHORN_TOL,
                        derivative_window: int = 7) -> TransportSolution:
    """Entropic surrogate of the optimal map on a regular grid.

    Args:
        L: Target density in dimension 1 or 2
        bound: Grid covers [-bound, bound]^n
        resolution: Grid points per axis
        epsilon_schedule: Decreasing ε values; the last must not exceed 1e-3 times the cell volume
        max_iter: Sinkhorn iteration cap per stage
        tol: Sinkhorn marginal tolerance
        derivative_window: Savitzky-Golay window (grid points) for Hessians

    Returns:
        TransportSolution: with the coupling and curl residual in diagnostics
    """
    n = L.dim
    if n > 2:
        raise DimensionMismatchError(f"Grid solver supports dimension 1 or 2, got {n}")
    if bound < MIN_GRID_BOUND:
        raise ValueError(f"Grid must cover at least {MIN_GRID_BOUND} standard deviations, got bound={bound}")
    axis = np.linspace(-bound, bound, resolution)
    h = axis[1] - axis[0]
    cell = h ** n
    schedule = list(epsilon_schedule) if epsilon_schedule else default_schedule(cell)
    if any(e <= 0 for e in schedule) or any(b > a for a, b in zip(schedule, schedule[1:])):
        raise ValueError(f"Epsilon schedule must be positive and decreasing: {schedule}")
    if schedule[-1] > 1e-3 * cell * (1 + 1e-9):
        raise ValueError(f"Final epsilon {schedule[-1]:.3g} exceeds 1e-3 times the cell volume ({cell:.3g})")
    if derivative_window % 2 == 0 or derivative_window > resolution:
        raise ValueError(f"Derivative window must be odd and at most the resolution: {derivative_window}")

    points = np.array(list(itertools.product(axis, repeat=n)))
    source = np.exp(log_gamma(points))
    source = source / source.sum()
    target = _target_weights(L, points, h)
    cost_matrix = 0.5 * np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)

    logger.info(f"Grid-entropic transport onto {L.name}: {len(points)} nodes, {len(schedule)} epsilon stages")
    plan, info = sinkhorn_log(source, target, cost_matrix, schedule, max_iter=max_iter, tol=tol)

    row_mass = plan.sum(axis=1)
    col_mass = plan.sum(axis=0)
    mapped = (plan @ points) / row_mass[:, None]
    occupied = col_mass > 1e-300
    pulled = np.where(occupied[:, None], (plan.T @ points) / np.where(occupied, col_mass, 1.0)[:, None], points)

    shape = (resolution,) * n
    displacement = (mapped - points).reshape(shape + (n,))
    pullback = (pulled - points).reshape(shape + (n,))

    phi_grid = _integrate_potential(axis, displacement, n)
    d_disp = [_axis_derivatives(displacement[..., k], h, n, derivative_window) for k in range(n)]
    hess_grid = np.empty(shape + (n, n))
    for j in range(n):
        for k in range(n):
            hess_grid[..., j, k] = 0.5 * (d_disp[k][j] + d_disp[j][k])
    d_pull = [_axis_derivatives(pullback[..., k], h, n, derivative_window) for k in range(n)]
    inv_jac_grid = np.empty(shape + (n, n))
    for j in range(n):
        for k in range(n):
            inv_jac_grid[..., j, k] = 0.5 * (d_pull[k][j] + d_pull[j][k]) + (1.0 if j == k else 0.0)

    curl = 0.0
    if n == 2:
        curl_field = d_disp[0][1] - d_disp[1][0]
        inner = slice(derivative_window, resolution - derivative_window)
        curl = float(np.abs(curl_field[inner, inner]).max())

    phi_interp = _GridField(axis, n, phi_grid)
    disp_interp = _GridField(axis, n, displacement)
    hess_interp = _GridField(axis, n, hess_grid)
    pull_interp = _GridField(axis, n, pullback)
    inv_jac_interp = _GridField(axis, n, inv_jac_grid)

    def forward(x):
        return x + disp_interp(x)

    def inverse(y):
        return y + pull_interp(y)

    phi = ScalarField(n, value=phi_interp, grad=disp_interp, hess=hess_interp, name=f"phi_grid[{L.name}]")
    psi = backward_potential(phi, inverse, inv_jac_interp)

    coupling = DiscreteCoupling(source_atoms=points, target_atoms=points, source_weights=source,
                                target_weights=target, plan=plan, cost=float(np.sum(plan * 2.0 * cost_matrix)))
    map_cost = float(source @ np.sum((mapped - points) ** 2, axis=1))
    diagnostics = {
        "coupling": coupling,
        "plan_cost": coupling.cost,
        "marginal_residual": coupling.marginal_residual(),
        "curl_residual": curl,
        "cell_width": h,
        "sinkhorn": info,
    }
    logger.info(f"Grid-entropic transport onto {L.name}: map cost {map_cost:.6g}, plan cost {coupling.cost:.6g}, "
                f"marginal residual {diagnostics['marginal_residual']:.2e}, curl {curl:.2e}")
    return TransportSolution(phi, psi, batch_map(n, forward, "T"), batch_map(n, inverse, "S"),
                             map_cost, SolverKind.GRID_ENTROPIC, target=L, diagnostics=diagnostics)
