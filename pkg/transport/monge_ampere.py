"""
Gaussian Jacobian Λ(φ) of a monotone shift T = I + ∇φ and the identities it satisfies.

Λ(φ) = det₂(I + ∇²φ)·exp(−𝓛φ − ½|∇φ|²) with 𝓛φ = x·∇φ − Δφ. For an optimal
map onto an H-log-concave L·μ, Λ(φ)·L∘T = 1 and the transport distance is
E[L log L] + E[log det₂(I + ∇²φ)].
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import xlogy
from scipy.stats import ortho_group

from common.errors import HypothesisError, InternalConsistencyError, MapNotMonotoneError
from common.models import BoundRow, ExpectationResult, GaussianSpace, JacobianReport, TalagrandReport
from config import JACOBIAN_CROSS_CHECK_TOL, MIN_SET_MASS
from transport.gauss_core import (
    DensitySpec,
    ScalarField,
    as_batch,
    box_mass,
    check_h_log_concave,
    expect,
    indicator_density,
    log_gamma,
    relative_entropy,
)
from transport.mk_transport import TransportSolution, solve_1d, solve_grid_entropic

logger = logging.getLogger(__name__)

TINY = np.finfo(float).tiny


def _single(out: np.ndarray, single: bool):
    return float(out[0]) if single else out


def _log_det2(hess: np.ndarray) -> np.ndarray:
    """log det₂(I + H) for symmetric H; eigenvalues rounding to −1 are floored at the smallest float."""
    eigs = np.linalg.eigvalsh(hess)
    return np.sum(np.log(np.maximum(1.0 + eigs, TINY)) - eigs, axis=-1)


def ou_operator(phi: ScalarField, x):
    """𝓛φ(x) = x·∇φ(x) − Δφ(x)."""
    batch, single = as_batch(x, phi.dim)
    out = np.sum(batch * phi.gradient(batch), axis=1) - phi.laplacian(batch)
    return _single(out, single)


def log_jacobian(phi: ScalarField, x, cross_check: bool = True):
    """log Λ(φ)(x), with the change-of-variables cross-check against det(I+∇²φ)·γ(T)/γ(x).

    Raises:
        MapNotMonotoneError: if some Hessian eigenvalue is ≤ −1
        InternalConsistencyError: if the two evaluations of Λ disagree
    """
    batch, single = as_batch(x, phi.dim)
    grad = phi.gradient(batch)
    hess = phi.hessian(batch)
    eigs = np.linalg.eigvalsh(hess)
    lows = eigs.min(axis=1)
    bad = np.argwhere(lows <= -1.0)
    if bad.size:
        i = int(bad[0][0])
        raise MapNotMonotoneError(batch[i].tolist(), float(lows[i]))

    drift = np.sum(batch * grad, axis=1)
    energy = 0.5 * np.sum(grad ** 2, axis=1)
    trace = np.trace(hess, axis1=1, axis2=2)
    log_lam = np.sum(np.log1p(eigs) - eigs, axis=1) - (drift - trace) - energy

    if cross_check:
        _, logdet = np.linalg.slogdet(np.eye(phi.dim)[None, :, :] + hess)
        other = logdet + log_gamma(batch + grad) - log_gamma(batch)
        scale = np.maximum(1.0, np.abs(drift) + energy + np.abs(trace))
        gap = np.abs(log_lam - other) / scale
        worst = int(np.argmax(gap))
        if gap[worst] > JACOBIAN_CROSS_CHECK_TOL:
            raise InternalConsistencyError(
                f"Jacobian cross-check failed at x={batch[worst].tolist()}: "
                f"log Λ = {log_lam[worst]:.12g} vs change of variables {other[worst]:.12g}"
            )
    return _single(log_lam, single)


def jacobian(phi: ScalarField, x, cross_check: bool = True):
    """Λ(φ)(x) = det₂(I+∇²φ(x))·exp(−𝓛φ(x) − ½|∇φ(x)|²)."""
    batch, single = as_batch(x, phi.dim)
    return _single(np.exp(log_jacobian(phi, batch, cross_check)), single)


def _require_log_concave(L: DensitySpec, points: np.ndarray):
    if not L.is_h_convex:
        raise HypothesisError(f"{L.name} is not declared H-log-concave")
    report = check_h_log_concave(L, points)
    if not report.holds:
        raise HypothesisError(
            f"{L.name} is not H-log-concave: Hessian eigenvalue {report.worst_eigenvalue:.3g} at {report.worst_point}"
        )


def _products(solution: TransportSolution, L: DensitySpec, points) -> np.ndarray:
    """Λ(φ)(x)·L(T(x)) evaluated in log space."""
    batch, _ = as_batch(points, solution.dim)
    with np.errstate(over='ignore'):
        return np.exp(log_jacobian(solution.phi, batch) + L.log_density(solution.forward_map(batch)))


def ma_residual(solution: TransportSolution, L: DensitySpec, test_points) -> float:
    """sup over the test points of |Λ(φ)·L∘T − 1|."""
    batch, _ = as_batch(test_points, solution.dim)
    _require_log_concave(L, batch)
    residual = float(np.abs(_products(solution, L, batch) - 1.0).max())
    logger.info(f"Monge-Ampère residual for {L.name} ({solution.solver.value}): {residual:.3e}")
    return residual


def subsolution_check(solution: TransportSolution, L: DensitySpec, test_points,
                      tol: float = 1e-8) -> Tuple[bool, float]:
    """Λ(φ)·L∘T ≤ 1 + tol at every test point.

    Returns:
        Tuple of the verdict and the largest product
    """
    worst = float(_products(solution, L, test_points).max())
    return worst <= 1.0 + tol, worst


def jacobian_report(solution: TransportSolution, L: DensitySpec, points,
                    space: Optional[GaussianSpace] = None) -> JacobianReport:
    """Pointwise Λ values and residuals together with the integrated quantities of the distance formula."""
    batch, _ = as_batch(points, solution.dim)
    space = space or GaussianSpace(dim=solution.dim)
    lam = jacobian(solution.phi, batch)
    with np.errstate(over='ignore'):
        residuals = np.abs(lam * np.exp(L.log_density(solution.forward_map(batch))) - 1.0)
    log_det = expect(lambda x: _log_det2(solution.phi.hessian(x)), space, label="log_det2")
    entropy = relative_entropy(L, space)
    half = expect(lambda x: 0.5 * np.sum(solution.phi.gradient(x) ** 2, axis=1), space, label="half_cost")
    return JacobianReport(points=batch, lambda_values=lam, ma_residuals=residuals,
                          det2_log_mean=float(log_det.value), det2_log_stderr=float(log_det.stderr),
                          entropy=float(entropy.value), cost_half=float(half.value))


def _combine(value: float, *parts: ExpectationResult, method=None) -> ExpectationResult:
    stderr = float(np.sqrt(sum(float(p.stderr) ** 2 for p in parts)))
    return ExpectationResult(value=value, stderr=stderr, method=method or parts[0].method,
                             nodes=max(p.nodes for p in parts))


def regularity_bound(solution: TransportSolution, L: DensitySpec,
                     space: Optional[GaussianSpace] = None) -> Tuple[ExpectationResult, ExpectationResult]:
    """(E[|∇φ|² + ‖∇²φ‖₂²], 2E[L log L]) with ‖·‖₂ the Hilbert-Schmidt norm."""
    space = space or GaussianSpace(dim=solution.dim)
    phi = solution.phi

    def integrand(x):
        return np.sum(phi.gradient(x) ** 2, axis=1) + np.sum(phi.hessian(x) ** 2, axis=(1, 2))

    lhs = expect(integrand, space, label="regularity")
    entropy = relative_entropy(L, space)
    rhs = ExpectationResult(value=2.0 * float(entropy.value), stderr=2.0 * float(entropy.stderr),
                            method=entropy.method, nodes=entropy.nodes)
    logger.info(f"Regularity bound for {L.name}: {lhs.value:.6g} <= {rhs.value:.6g}")
    return lhs, rhs


def distance_identity(solution: TransportSolution, L: DensitySpec,
                      space: Optional[GaussianSpace] = None) -> Tuple[ExpectationResult, ExpectationResult]:
    """(½d², E[L log L] + E[log det₂(I + ∇²φ)])."""
    space = space or GaussianSpace(dim=solution.dim)
    phi = solution.phi
    half = expect(lambda x: 0.5 * np.sum(phi.gradient(x) ** 2, axis=1), space, label="half_cost")
    log_det = expect(lambda x: _log_det2(phi.hessian(x)), space, label="log_det2")
    entropy = relative_entropy(L, space)
    rhs = _combine(float(entropy.value) + float(log_det.value), entropy, log_det)
    logger.info(f"Distance identity for {L.name}: ½d²={half.value:.6g}, entropy+logdet={rhs.value:.6g}")
    return half, rhs


def convex_set_mass(lower, upper, test_points, space: Optional[GaussianSpace] = None,
                    **grid_options) -> Tuple[float, float, float, float]:
    """Gaussian mass of a box A three ways: normal CDFs, the constant value of Λ(φ), and exp(−½d² + E[log det₂]).

    Args:
        lower: Lower corner of A (entries may be -inf)
        upper: Upper corner of A (entries may be inf)
        test_points: Points at which Λ(φ) is evaluated
        space: Gaussian space for the expectations
        **grid_options: Options for the grid solver in 2D

    Returns:
        Tuple (μ(A), mean of Λ(φ), formula value, spread of Λ(φ) over the test points)
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    mass = box_mass(lower, upper)
    if mass < MIN_SET_MASS:
        raise HypothesisError(f"Set mass {mass:.3e} is below {MIN_SET_MASS}; the transport is numerically degenerate")
    L = indicator_density(lower, upper)
    space = space or GaussianSpace(dim=L.dim)
    solution = solve_1d(L, space=space) if L.dim == 1 else solve_grid_entropic(L, **grid_options)
    lam = jacobian(solution.phi, test_points)
    half = expect(lambda x: 0.5 * np.sum(solution.phi.gradient(x) ** 2, axis=1), space, label="half_cost")
    log_det = expect(lambda x: _log_det2(solution.phi.hessian(x)), space, label="log_det2")
    formula = float(np.exp(-float(half.value) + float(log_det.value)))
    logger.info(f"Convex set mass of [{lower}, {upper}]: direct {mass:.6f}, Λ {np.mean(lam):.6f}, formula {formula:.6f}")
    return mass, float(np.mean(lam)), formula, float(np.ptp(lam))


def caffarelli_check(solution: TransportSolution, grid, tol: float = 1e-8) -> Tuple[bool, Tuple[float, float]]:
    """Eigenvalues of ∇²φ inside [−1, 0], i.e. T is 1-Lipschitz.

    Returns:
        Tuple of the verdict and the (min, max) eigenvalue over the grid
    """
    if solution.target is not None and not solution.target.is_h_convex:
        logger.warning(f"{solution.target.name} is not H-log-concave; the contraction property need not hold")
    batch, _ = as_batch(grid, solution.dim)
    eigs = np.linalg.eigvalsh(solution.phi.hessian(batch))
    lo, hi = float(eigs.min()), float(eigs.max())
    return (lo >= -1.0 - tol and hi <= tol), (lo, hi)


def interpolation_bound(solution: TransportSolution, L: DensitySpec, t_grid: Sequence[float], points,
                        rtol: float = 1e-6) -> List[BoundRow]:
    """Density L_t of (I + t∇φ)μ against (1/c)e^{αt} on the images of the points.

    L_t(T_t x) = γ(x) / (γ(T_t x)·det(I + t∇²φ(x))).

    Raises:
        HypothesisError: if no lower bound α of the exponent is known
        MapNotMonotoneError: if some T_t is not injective
    """
    if L.alpha_lower_bound is None:
        raise HypothesisError(f"No lower bound on the exponent of {L.name}")
    alpha, c = L.alpha_lower_bound, L.normalization_c
    batch, _ = as_batch(points, solution.dim)
    grad = solution.phi.gradient(batch)
    hess = solution.phi.hessian(batch)
    eye = np.eye(solution.dim)[None, :, :]
    rows = []
    for t in t_grid:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"Interpolation time must lie in [0, 1]: {t}")
        eigs = np.linalg.eigvalsh(t * hess)
        lows = eigs.min(axis=1)
        if np.any(lows <= -1.0):
            i = int(np.argmin(lows))
            raise MapNotMonotoneError(batch[i].tolist(), float(lows[i]))
        _, logdet = np.linalg.slogdet(eye + t * hess)
        log_lt = log_gamma(batch) - log_gamma(batch + t * grad) - logdet
        log_bound = alpha * t - np.log(c)
        density = np.exp(log_lt)
        bound = float(np.exp(log_bound))
        entropy_ok = np.all(xlogy(density, density) <= log_bound * density + rtol * np.maximum(1.0, density))
        row = BoundRow(t=float(t), max_density=float(density.max()), bound=bound,
                       holds=bool(density.max() <= bound * (1.0 + rtol)), entropy_inequality_holds=bool(entropy_ok))
        rows.append(row)
    return rows


def free_energy_via_det2(solution: TransportSolution, L: DensitySpec,
                         space: Optional[GaussianSpace] = None) -> Tuple[float, ExpectationResult]:
    """(−log E[e^{−f}], E[f∘T − log det₂(I + ∇²φ) + ½|∇φ|²])."""
    space = space or GaussianSpace(dim=solution.dim)
    phi = solution.phi

    def integrand(x):
        fx = L.exponent.values(solution.forward_map(x))
        return fx - _log_det2(phi.hessian(x)) + 0.5 * np.sum(phi.gradient(x) ** 2, axis=1)

    rhs = expect(integrand, space, label="free_energy")
    return float(-np.log(L.normalization_c)), rhs


def talagrand_check(solution: TransportSolution, L: DensitySpec,
                    space: Optional[GaussianSpace] = None, tol: float = 1e-10) -> TalagrandReport:
    """E[log det₂(I + ∇²φ)] ≤ 0 and d² ≤ 2E[L log L]."""
    space = space or GaussianSpace(dim=solution.dim)
    phi = solution.phi
    log_det = expect(lambda x: _log_det2(phi.hessian(x)), space, label="log_det2")
    d2 = expect(lambda x: np.sum(phi.gradient(x) ** 2, axis=1), space, label="cost")
    entropy = relative_entropy(L, space)
    stderr = float(np.sqrt(float(log_det.stderr) ** 2 + float(d2.stderr) ** 2 + 4.0 * float(entropy.stderr) ** 2))
    slack = tol + 2.0 * stderr
    holds = float(log_det.value) <= slack and float(d2.value) <= 2.0 * float(entropy.value) + slack
    return TalagrandReport(holds=bool(holds), log_det_mean=float(log_det.value), distance_sq=float(d2.value),
                           entropy_bound=2.0 * float(entropy.value), stderr=stderr)


def random_symmetric_above(dim: int, count: int, rng: np.random.Generator, high: float = 3.0) -> np.ndarray:
    """Symmetric matrices with spectrum in (−1, high), shape (count, dim, dim)."""
    out = np.empty((count, dim, dim))
    for i in range(count):
        q = ortho_group.rvs(dim, random_state=rng) if dim > 1 else np.ones((1, 1))
        eigs = rng.uniform(-1.0 + 1e-3, high, size=dim)
        out[i] = (q * eigs) @ q.T
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def log_det2_convexity_gap(a: np.ndarray, s: float, t: float) -> float:
    """½(g(s) + g(t)) − g((s+t)/2) for g(τ) = −log det₂(I + τA); nonnegative for A ≥ −I and s, t ∈ [0, 1]."""
    a = np.atleast_2d(np.asarray(a, dtype=float))

    def g(tau):
        return -float(_log_det2(tau * a))

    return 0.5 * (g(s) + g(t)) - g(0.5 * (s + t))


def scaled_field(phi: ScalarField, t: float) -> ScalarField:
    return ScalarField(phi.dim, lambda x: t * phi.values(x), lambda x: t * phi.gradient(x),
                       lambda x: t * phi.hessian(x), name=f"{t:g}*{phi.name}")


def log_jacobian_expansion(phi: ScalarField, x, t_grid: Optional[Sequence[float]] = None,
                           step: float = 1e-3) -> dict:
    """m(t) = −log Λ(tφ)(x) on a t-grid, with m'(0) and m''(0) by one-sided differences.

    Returns:
        Dict with the grid, m values, m'(0), m''(0) and margin m(1) − m'(0) − ½m''(0)
    """
    t_grid = np.linspace(0.0, 1.0, 11) if t_grid is None else np.asarray(t_grid, dtype=float)

    def m(t):
        return -float(log_jacobian(scaled_field(phi, t), x))

    m0, m1, m2 = m(0.0), m(step), m(2.0 * step)
    first = (-3.0 * m0 + 4.0 * m1 - m2) / (2.0 * step)
    second = (m0 - 2.0 * m1 + m2) / step ** 2
    values = np.array([m(t) for t in t_grid])
    margin = m(1.0) - first - 0.5 * second
    return {"t": t_grid, "m": values, "first": first, "second": second, "margin": margin}


