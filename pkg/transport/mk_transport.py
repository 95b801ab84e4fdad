"""
Monge-Kantorovitch transport of the standard Gaussian onto L·μ.

Solvers live in transport/solvers; this module assembles them with the
closed-form Gaussian solver and the checks run against any TransportSolution:
cyclic monotonicity, the duality contract, invertibility, push-forward
two-sample tests, the smoothing/projection ladder and polar factorization.
"""
import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import kstest, ks_2samp

from common.errors import DimensionMismatchError, HypothesisError, OperatorNotInvertibleError
from common.models import (
    DualityReport,
    GaussianSpace,
    InverseReport,
    LadderRung,
    MonotonicityReport,
    PolarBackend,
    SolverKind,
    TwoSampleReport,
)
from common.utils import make_rng
from config import MC_SAMPLES
from transport.gauss_core import (
    DensitySpec,
    as_batch,
    expect,
    gaussian_ratio_density,
    quadratic_field,
    relative_entropy,
    sample_target,
    smoothed_density,
)
from transport.hs_operators import as_operator, gaussian_target_operator, linear_map, polar_decompose
from transport.solution import TransportSolution, backward_potential, batch_map
from transport.solvers.cdf_solver import solve_1d
from transport.solvers.discrete_solver import (
    brute_force_assignment,
    brute_force_min_rotation,
    coupling_map,
    solve_discrete,
)
from transport.solvers.entropic_solver import solve_grid_entropic

logger = logging.getLogger(__name__)

__all__ = [
    "TransportSolution", "backward_potential", "solve_1d", "solve_gaussian", "solve_grid_entropic",
    "solve_discrete", "brute_force_assignment", "brute_force_min_rotation", "coupling_map",
    "check_cyclic_monotonicity", "random_cycles", "duality_gap", "inverse_consistency", "pushforward_ks", "two_sample_ks",
    "cost_lower_bound", "solution_discrepancy", "solve_density", "approximation_ladder",
    "PolarFactorization", "polar_factorize", "right_inverse_check", "right_inverse_error",
]

MapLike = Union[TransportSolution, Callable[[np.ndarray], np.ndarray]]

# the quantile table behind the monotone polar factors is this many times the test sample
MONOTONE_TABLE_FACTOR = 10


def _forward(solution: MapLike) -> Callable:
    return solution.forward_map if isinstance(solution, TransportSolution) else solution


def solve_gaussian(cov, mean=None) -> TransportSolution:
    """Closed-form transport of N(0, I) onto N(mean, cov).

    T(x) = mean + Σ^{1/2}x, φ(x) = ½ x·Nx + mean·x with I + N = Σ^{1/2}.

    Raises:
        NotPositiveDefiniteError: if cov is indefinite or singular
    """
    op = gaussian_target_operator(cov)
    n = op.dim
    mean = np.zeros(n) if mean is None else np.asarray(mean, dtype=float).reshape(n)
    target = gaussian_ratio_density(mean, np.atleast_2d(np.asarray(cov, dtype=float)))
    root = op.identity_plus
    root_inv = np.linalg.inv(root)
    root_inv = 0.5 * (root_inv + root_inv.T)

    phi = quadratic_field(op.matrix, linear=mean, name="phi_gaussian")
    forward = linear_map(root, mean)
    inverse_matrix = linear_map(root_inv, -root_inv @ mean)
    psi = backward_potential(phi, inverse_matrix, lambda y: np.broadcast_to(root_inv, (y.shape[0], n, n)).copy())

    cost = float(np.trace(root @ root) + n - 2.0 * np.trace(root) + mean @ mean)
    logger.info(f"Gaussian closed-form transport in R^{n}: cost={cost:.6g}")
    return TransportSolution(
        phi, psi, batch_map(n, forward, "T"), batch_map(n, inverse_matrix, "S"), cost,
        SolverKind.GAUSSIAN_CLOSED_FORM, target=target, diagnostics={"root": root},
    )


def solve_density(L: DensitySpec, space: Optional[GaussianSpace] = None, **grid_options) -> TransportSolution:
    """Dispatch to the solver suited to L: closed form, monotone rearrangement or grid."""
    if L.gaussian is not None:
        mean, cov = L.gaussian
        return solve_gaussian(cov, mean)
    if L.dim == 1:
        return solve_1d(L, space=space)
    if L.dim == 2:
        return solve_grid_entropic(L, **grid_options)
    raise DimensionMismatchError(f"No solver for non-Gaussian densities in R^{L.dim}")


def random_cycles(dim: int, count: int, length: int, seed: int, scale: float = 2.0) -> np.ndarray:
    """Closed cycles of Gaussian points, shape (count, length, dim)."""
    rng = make_rng(seed, "cycles")
    return scale * rng.standard_normal((count, length, dim))


def check_cyclic_monotonicity(solution: MapLike, cycles, tol: float = 1e-9) -> MonotonicityReport:
    """Σᵢ (T(uᵢ), u_{i+1} − uᵢ) ≤ 0 over each closed cycle.

    Args:
        solution: TransportSolution or a batched map
        cycles: Array (C, N, n) or list of (N, n) arrays; u_{N+1} = u₁ is implied
        tol: Allowed positive slack

    Returns:
        MonotonicityReport: holds, the largest cycle sum, number of cycles
    """
    forward = _forward(solution)
    sums = []
    for cycle in cycles:
        pts = np.asarray(cycle, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        image = np.asarray(forward(pts), dtype=float).reshape(pts.shape)
        steps = np.roll(pts, -1, axis=0) - pts
        sums.append(float(np.sum(image * steps)))
    if not sums:
        raise ValueError("No cycles supplied")
    worst = max(sums)
    return MonotonicityReport(holds=bool(worst <= tol), worst_slack=worst, cycles=len(sums))


def duality_gap(solution: TransportSolution, sample, probe: Tuple[np.ndarray, np.ndarray]) -> DualityReport:
    """Residuals of the duality contract φ(x) + ψ(y) + ½|x − y|² ≥ 0, = 0 on the graph of T.

    Args:
        solution: Solution with both potentials
        sample: Points x; the on-graph pairs are (x, T(x))
        probe: Independent pairs (x, y) for the off-graph inequality

    Returns:
        DualityReport: max |on-graph value| and min off-graph value
    """
    n = solution.dim
    x, _ = as_batch(sample, n)
    tx = solution.forward_map(x)
    on_graph = solution.phi.values(x) + solution.psi.values(tx) + 0.5 * np.sum((x - tx) ** 2, axis=1)
    px, _ = as_batch(probe[0], n)
    py, _ = as_batch(probe[1], n)
    off_graph = solution.phi.values(px) + solution.psi.values(py) + 0.5 * np.sum((px - py) ** 2, axis=1)
    return DualityReport(on_graph_max=float(np.abs(on_graph).max()), off_graph_min=float(off_graph.min()))


def inverse_consistency(solution: TransportSolution, sample, target_sample=None) -> InverseReport:
    """max |S(T(x)) − x| on μ-samples and max |T(S(y)) − y| on ν-samples."""
    n = solution.dim
    x, _ = as_batch(sample, n)
    forward_error = float(np.abs(solution.inverse_map(solution.forward_map(x)) - x).max())
    backward_error = 0.0
    if target_sample is not None:
        y, _ = as_batch(target_sample, n)
        backward_error = float(np.abs(solution.forward_map(solution.inverse_map(y)) - y).max())
    return InverseReport(forward_error=forward_error, backward_error=backward_error)


def two_sample_ks(a: np.ndarray, b: np.ndarray, seed: int = 0, alpha: float = 0.01,
                  projections: int = 4) -> TwoSampleReport:
    """KS test per coordinate and along random directions, Bonferroni-corrected."""
    n = a.shape[1]
    if n == 1:
        res = ks_2samp(a[:, 0], b[:, 0])
        return TwoSampleReport(statistic=float(res.statistic), pvalue=float(res.pvalue),
                               passed=bool(res.pvalue > alpha), samples=a.shape[0])
    rng = make_rng(seed, "ks_directions")
    directions = np.vstack([np.eye(n), rng.standard_normal((projections, n))])
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    stats, pvalues = [], []
    for d in directions:
        res = ks_2samp(a @ d, b @ d)
        stats.append(res.statistic)
        pvalues.append(res.pvalue)
    worst = int(np.argmin(pvalues))
    adjusted = min(1.0, pvalues[worst] * len(directions))
    return TwoSampleReport(statistic=float(stats[worst]), pvalue=float(adjusted),
                           passed=bool(adjusted > alpha), samples=a.shape[0])


def pushforward_ks(solution: TransportSolution, L: Optional[DensitySpec] = None, m: int = 10000,
                   seed: int = 0, alpha: float = 0.01, projections: int = 4) -> TwoSampleReport:
    """Two-sample KS test between T(samples of μ) and direct samples of L·μ."""
    L = L or solution.target
    if L is None:
        raise ValueError("No target density to compare against")
    x = make_rng(seed, "ks_source").standard_normal((m, solution.dim))
    pushed = solution.forward_map(x)
    direct = sample_target(L, m, seed, label="ks_target")
    report = two_sample_ks(pushed, direct, seed, alpha, projections)
    logger.info(f"Push-forward KS onto {L.name}: D={report.statistic:.4f}, p={report.pvalue:.3g}")
    return report


def cost_lower_bound(solution: TransportSolution, competitor: Callable, space: Optional[GaussianSpace] = None) -> Tuple[float, float]:
    """Optimal cost against ∫|U − x|² dμ for a competing transport U of μ onto the same target."""
    space = space or GaussianSpace(dim=solution.dim)
    competitor_cost = expect(lambda x: np.sum((competitor(x) - x) ** 2, axis=1), space, label="competitor_cost")
    return solution.cost, float(competitor_cost.value)


def solution_discrepancy(a: TransportSolution, b: TransportSolution, points) -> Tuple[float, float]:
    """(max |T_a − T_b| on the points, |cost_a − cost_b|)."""
    batch, _ = as_batch(points, a.dim)
    return float(np.abs(a.forward_map(batch) - b.forward_map(batch)).max()), abs(a.cost - b.cost)


def _lift_gradient(solution: TransportSolution, n: int) -> Callable:
    k = solution.dim

    def grad(x):
        out = np.zeros_like(x)
        out[:, :k] = solution.phi.gradient(x[:, :k])
        return out

    return grad


def approximation_ladder(L: DensitySpec, dims: Sequence[int], space: Optional[GaussianSpace] = None,
                         reference: Optional[TransportSolution] = None,
                         smoothing: Optional[Callable[[int], float]] = None,
                         **grid_options) -> Tuple[List[TransportSolution], List[LadderRung]]:
    """Solve L_k = E[P_{t_k} L | V_k] for each k and compare ∇φ_k with ∇φ in L²(μ).

    Args:
        L: Density on the largest dimension
        dims: Ladder dimensions k, each at most L.dim
        space: Gaussian space on R^{L.dim}
        reference: Exact solution for L; solved here when omitted
        smoothing: t_k as a function of k, default 1/k

    Returns:
        Tuple of the rung solutions and the error table
    """
    n = L.dim
    if any(k < 1 or k > n for k in dims):
        raise ValueError(f"Ladder dimensions must lie in [1, {n}]: {list(dims)}")
    space = space or GaussianSpace(dim=n)
    smoothing = smoothing or (lambda k: 1.0 / k)
    reference = reference or solve_density(L, space, **grid_options)
    exact_grad = reference.phi.gradient

    solutions, rungs = [], []
    for k in dims:
        t = float(smoothing(k))
        L_k = smoothed_density(L, t, k, space)
        sol = solve_density(L_k, space.with_dim(k), **grid_options)
        lifted = _lift_gradient(sol, n)
        err = expect(lambda x: np.sum((lifted(x) - exact_grad(x)) ** 2, axis=1), space, label=f"ladder:{k}")
        entropy = relative_entropy(L_k, space.with_dim(k))
        # delta method on the square root
        stderr = float(err.stderr) / (2.0 * np.sqrt(err.value)) if err.value > 0 else 0.0
        rung = LadderRung(dim=k, smoothing=t, gradient_error=float(np.sqrt(max(err.value, 0.0))),
                          gradient_error_stderr=stderr, entropy=float(entropy.value), cost=sol.cost)
        logger.info(f"Ladder rung k={k} (t={t:g}): error={rung.gradient_error:.4g}, entropy={rung.entropy:.4g}")
        solutions.append(sol)
        rungs.append(rung)
    return solutions, rungs


class PolarFactorization:
    """U = T∘R with T the optimal map from ρ to Uρ and R a ρ-rotation.

    Args:
        backend: How the factorization was computed
        transport: T on batches (or atoms)
        rotation: R on batches (or atoms)
        transport_cost: ∫|T − x|² dρ
        rotation_cost: ∫|U − R|² dρ
        details: Backend-specific data (polar parts, permutations, test reports)
    """

    def __init__(self, backend: PolarBackend, transport: Callable, rotation: Callable,
                 transport_cost: float, rotation_cost: float, details: Optional[dict] = None):
        self.backend = PolarBackend(backend)
        self.transport = transport
        self.rotation = rotation
        self.transport_cost = float(transport_cost)
        self.rotation_cost = float(rotation_cost)
        self.details = details or {}

    @property
    def cost_gap(self) -> float:
        return abs(self.transport_cost - self.rotation_cost)

    def __repr__(self):
        return (f"PolarFactorization(backend={self.backend.value}, transport_cost={self.transport_cost:.6g}, "
                f"rotation_cost={self.rotation_cost:.6g})")


def _polar_linear(k) -> PolarFactorization:
    op = as_operator(k)
    parts = polar_decompose(op)
    eye = np.eye(op.dim)
    # over ρ = μ: ∫|Mx|² dμ = ‖M‖_F²
    transport_cost = float(np.sum(parts.kbar ** 2))
    rotation_cost = float(np.sum((op.identity_plus - eye - parts.a) ** 2))
    return PolarFactorization(
        PolarBackend.LINEAR, linear_map(eye + parts.kbar), linear_map(eye + parts.a),
        transport_cost, rotation_cost, details={"parts": parts, "residuals": parts.residuals(op.matrix)},
    )


def _polar_discrete(source, image) -> PolarFactorization:
    source = np.asarray(source, dtype=float)
    image = np.asarray(image, dtype=float)
    if source.ndim == 1:
        source, image = source[:, None], image[:, None]
    if len(np.unique(np.round(image, 12), axis=0)) < len(image):
        raise OperatorNotInvertibleError("operator not invertible: U merges atoms, so T has no inverse on its image")
    coupling = solve_discrete(source, image)
    sigma = coupling.assignment
    # T(x_i) = U(x_{σ(i)}), hence R(x_j) = x_{σ⁻¹(j)}
    rotation_perm = np.argsort(sigma)
    rotation_cost = float(np.mean(np.sum((image - source[rotation_perm]) ** 2, axis=1)))
    return PolarFactorization(
        PolarBackend.DISCRETE, coupling_map(coupling),
        lambda x: source[rotation_perm[_atom_index(source, x)]],
        coupling.cost, rotation_cost, details={"coupling": coupling, "rotation": rotation_perm},
    )


def _atom_index(atoms: np.ndarray, x) -> np.ndarray:
    pts = np.asarray(x, dtype=float).reshape(-1, atoms.shape[1])
    d = np.sum((pts[:, None, :] - atoms[None, :, :]) ** 2, axis=2)
    idx = d.argmin(axis=1)
    if np.any(d[np.arange(len(idx)), idx] > 1e-20):
        raise ValueError("Point is not a source atom")
    return idx


def _polar_monotone_1d(U: Callable, m: int, seed: int, alpha: float) -> PolarFactorization:
    rng = make_rng(seed, "polar_1d")
    size = MONOTONE_TABLE_FACTOR * m
    x = rng.standard_normal(size)
    y = np.sort(np.asarray(U(x[:, None]), dtype=float).reshape(size))
    if len(np.unique(y)) < 0.99 * size:
        raise HypothesisError("Image of U has atoms; the monotone map onto it is not invertible")
    levels = (np.arange(size) + 0.5) / size

    def transport(z):
        z = np.asarray(z, dtype=float).reshape(-1)
        return np.interp(ndtr(z), levels, y)[:, None]

    def rotation(z):
        z = np.asarray(z, dtype=float).reshape(-1)
        u = np.interp(np.asarray(U(z[:, None]), dtype=float).reshape(-1), y, levels)
        return ndtri(u)[:, None]

    fresh = make_rng(seed, "polar_1d_check").standard_normal((m, 1))
    rotated = rotation(fresh)[:, 0]
    test = kstest(rotated, 'norm')
    ks = TwoSampleReport(statistic=float(test.statistic), pvalue=float(test.pvalue),
                         passed=bool(test.pvalue > alpha), samples=m)
    transport_cost = float(np.mean((transport(fresh)[:, 0] - fresh[:, 0]) ** 2))
    rotation_cost = float(np.mean((np.asarray(U(fresh), dtype=float).reshape(m) - rotated) ** 2))
    logger.info(f"Monotone polar factorization: rotation KS D={ks.statistic:.4f}, p={ks.pvalue:.3g}")
    return PolarFactorization(PolarBackend.MONOTONE_1D, transport, rotation, transport_cost, rotation_cost,
                              details={"rotation_ks": ks})


def polar_factorize(U, backend: PolarBackend = PolarBackend.LINEAR, source=None, m: int = MC_SAMPLES,
                    seed: int = 0, alpha: float = 0.01) -> PolarFactorization:
    """Factor U = T∘R with T optimal from ρ to Uρ and R = T⁻¹∘U measure-preserving.

    Args:
        U: K of U = I + K (linear), image atoms U(xᵢ) (discrete) or a 1D map (monotone_1d)
        backend: linear, discrete or monotone_1d
        source: Source atoms xᵢ for the discrete backend
        m: Sample size for the monotone_1d backend
        seed: Seed for the monotone_1d backend
        alpha: Significance level of the rotation's KS test

    Returns:
        PolarFactorization
    """
    backend = PolarBackend(backend)
    if backend == PolarBackend.LINEAR:
        return _polar_linear(U)
    if backend == PolarBackend.DISCRETE:
        if source is None:
            raise ValueError("Discrete polar factorization needs the source atoms")
        return _polar_discrete(source, U)
    return _polar_monotone_1d(U, m, seed, alpha)


def right_inverse_error(T: Callable, theta: Callable, sample) -> float:
    """max |T(Θ(x)) − x| over the sample."""
    x = np.asarray(sample, dtype=float)
    return float(np.abs(np.asarray(T(theta(x))).reshape(x.shape) - x).max())


def right_inverse_check(T: Callable, theta: Callable, sample, tol: float = 1e-8) -> bool:
    """T∘Θ = identity on the sample."""
    error = right_inverse_error(T, theta, sample)
    if error >= tol:
        logger.warning(f"Right inverse check failed: max |T(Θ(x)) − x| = {error:.3e}")
    return error < tol
