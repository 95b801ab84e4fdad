"""
Calculus on the standard Gaussian space R^n.

Scalar fields with closed-form or finite-difference derivatives,
densities L = e^{-f}/c, Gaussian expectations by tensor Gauss-Hermite
quadrature or Monte Carlo, Ornstein-Uhlenbeck smoothing, coordinate
conditioning and convexity predicates.
"""
import itertools
import logging
from functools import lru_cache
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.special import xlogy
from scipy.stats import norm, truncnorm

from common.errors import (
    DimensionMismatchError,
    HypothesisError,
    NonFiniteValueError,
    NotPositiveDefiniteError,
    QuadratureOverflowError,
    UnnormalizedDensityError,
)
from common.models import ConvexityReport, DifferentiationMode, ExpectationMethod, ExpectationResult, GaussianSpace
from common.utils import make_rng
from config import CONVEXITY_TOL, FD_STEP, NORMALIZATION_TOL, QUADRATURE_MAX_DIM

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)

BatchFn = Callable[[np.ndarray], np.ndarray]


def as_batch(x, dim: int) -> Tuple[np.ndarray, bool]:
    """Coerce a point or a batch of points to shape (m, dim).

    In 1D a flat vector is read as a batch of scalars.

    Returns:
        Tuple of the batch and whether the input was a single point
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0 and dim == 1:
        return arr.reshape(1, 1), True
    if arr.ndim == 1:
        if arr.shape[0] == dim:
            return arr[None, :], True
        if dim == 1:
            return arr[:, None], False
    if arr.ndim == 2 and arr.shape[1] == dim:
        return arr, False
    raise DimensionMismatchError(f"Expected points in R^{dim}, got shape {np.shape(x)}")


def _fd_steps(x: np.ndarray, base: float) -> np.ndarray:
    return base * np.maximum(1.0, np.linalg.norm(x, axis=1))


class ScalarField:
    """A function R^n -> R evaluated on batches of shape (m, n).

    Args:
        dim: Dimension n
        value: Batched evaluation, (m, n) -> (m,)
        grad: Optional batched gradient, (m, n) -> (m, n)
        hess: Optional batched Hessian, (m, n) -> (m, n, n)
        name: Label used in logs and error messages
    """

    def __init__(self, dim: int, value: BatchFn, grad: Optional[BatchFn] = None,
                 hess: Optional[BatchFn] = None, name: str = "field"):
        self.dim = dim
        self._value = value
        self._grad = grad
        self._hess = hess
        self.name = name

    @property
    def differentiation_mode(self) -> DifferentiationMode:
        if self._grad is not None and self._hess is not None:
            return DifferentiationMode.CLOSED_FORM
        return DifferentiationMode.FINITE_DIFFERENCE

    def values(self, x) -> np.ndarray:
        batch, _ = as_batch(x, self.dim)
        return np.asarray(self._value(batch), dtype=float).reshape(batch.shape[0])

    def __call__(self, x):
        batch, single = as_batch(x, self.dim)
        out = np.asarray(self._value(batch), dtype=float).reshape(batch.shape[0])
        return float(out[0]) if single else out

    def gradient(self, x) -> np.ndarray:
        batch, single = as_batch(x, self.dim)
        if self._grad is not None:
            out = np.asarray(self._grad(batch), dtype=float).reshape(batch.shape)
        else:
            out = self._fd_gradient(batch)
        return out[0] if single else out

    def hessian(self, x) -> np.ndarray:
        batch, single = as_batch(x, self.dim)
        m, n = batch.shape
        if self._hess is not None:
            out = np.asarray(self._hess(batch), dtype=float).reshape(m, n, n)
        elif self._grad is not None:
            out = self._fd_hessian_from_grad(batch)
        else:
            out = self._fd_hessian_from_values(batch)
        out = 0.5 * (out + np.swapaxes(out, 1, 2))
        return out[0] if single else out

    def laplacian(self, x):
        return np.trace(self.hessian(x), axis1=-2, axis2=-1)

    def _fd_gradient(self, batch: np.ndarray) -> np.ndarray:
        m, n = batch.shape
        h = _fd_steps(batch, FD_STEP)
        out = np.empty((m, n))
        for j in range(n):
            shift = np.zeros((m, n))
            shift[:, j] = h
            out[:, j] = (self.values(batch + shift) - self.values(batch - shift)) / (2.0 * h)
        return out

    def _fd_hessian_from_grad(self, batch: np.ndarray) -> np.ndarray:
        m, n = batch.shape
        h = _fd_steps(batch, FD_STEP)
        out = np.empty((m, n, n))
        for j in range(n):
            shift = np.zeros((m, n))
            shift[:, j] = h
            diff = self._grad(batch + shift) - self._grad(batch - shift)
            out[:, :, j] = np.asarray(diff).reshape(m, n) / (2.0 * h)[:, None]
        return out

    def _fd_hessian_from_values(self, batch: np.ndarray) -> np.ndarray:
        m, n = batch.shape
        # second differences of values need a larger step than first differences
        h = _fd_steps(batch, 1e-4)
        f0 = self.values(batch)
        out = np.empty((m, n, n))
        eye = np.eye(n)
        for j in range(n):
            ej = eye[j] * h[:, None]
            out[:, j, j] = (self.values(batch + ej) - 2.0 * f0 + self.values(batch - ej)) / h ** 2
            for k in range(j + 1, n):
                ek = eye[k] * h[:, None]
                mixed = (self.values(batch + ej + ek) - self.values(batch + ej - ek)
                         - self.values(batch - ej + ek) + self.values(batch - ej - ek)) / (4.0 * h ** 2)
                out[:, j, k] = mixed
                out[:, k, j] = mixed
        return out


def constant_field(dim: int, c: float = 0.0) -> ScalarField:
    return ScalarField(
        dim,
        value=lambda x: np.full(x.shape[0], float(c)),
        grad=lambda x: np.zeros_like(x),
        hess=lambda x: np.zeros((x.shape[0], dim, dim)),
        name=f"const({c})",
    )


def quadratic_field(matrix, linear=None, constant: float = 0.0, name: str = "quadratic") -> ScalarField:
    """½ x·Ax + b·x + c with A symmetrized."""
    a = np.atleast_2d(np.asarray(matrix, dtype=float))
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    b = np.zeros(n) if linear is None else np.asarray(linear, dtype=float).reshape(n)
    return ScalarField(
        n,
        value=lambda x: 0.5 * np.einsum('mi,ij,mj->m', x, a, x) + x @ b + constant,
        grad=lambda x: x @ a + b,
        hess=lambda x: np.broadcast_to(a, (x.shape[0], n, n)).copy(),
        name=name,
    )


def quartic_field(a: float, dim: int = 1) -> ScalarField:
    """(a/4) Σ xᵢ⁴."""
    return ScalarField(
        dim,
        value=lambda x: 0.25 * a * np.sum(x ** 4, axis=1),
        grad=lambda x: a * x ** 3,
        hess=lambda x: np.einsum('mi,ij->mij', 3.0 * a * x ** 2, np.eye(dim)),
        name=f"quartic({a:g})",
    )


def exp_neg(f: ScalarField) -> ScalarField:
    """e^{-f} with derivatives by the chain rule."""
    def value(x):
        return np.exp(-f.values(x))

    def grad(x):
        return -value(x)[:, None] * f.gradient(x)

    def hess(x):
        g = f.gradient(x)
        return value(x)[:, None, None] * (np.einsum('mi,mj->mij', g, g) - f.hessian(x))

    return ScalarField(f.dim, value, grad, hess, name=f"exp(-{f.name})")


def neg_log(g: ScalarField) -> ScalarField:
    """-log g for a positive field g."""
    def value(x):
        return -np.log(g.values(x))

    def grad(x):
        return -g.gradient(x) / g.values(x)[:, None]

    def hess(x):
        v = g.values(x)[:, None, None]
        dg = g.gradient(x)
        return -g.hessian(x) / v + np.einsum('mi,mj->mij', dg, dg) / v ** 2

    return ScalarField(g.dim, value, grad, hess, name=f"-log({g.name})")


class DensitySpec:
    """Density L = e^{-f}/c of a probability measure with respect to the standard Gaussian.

    Args:
        exponent: The exponent f
        normalization_c: c = E[e^{-f}]
        is_h_convex: Whether the scenario declares f convex
        alpha_lower_bound: alpha with f >= -alpha, when known
        sampler: Optional exact sampler (rng, m) -> (m, n) for L·μ
        support: Optional (lower, upper) box outside of which L vanishes
        gaussian: Optional (mean, cov) when L·μ is Gaussian
    """

    def __init__(self, exponent: ScalarField, normalization_c: float, is_h_convex: bool = False,
                 alpha_lower_bound: Optional[float] = None, sampler=None,
                 support: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                 gaussian: Optional[Tuple[np.ndarray, np.ndarray]] = None, name: str = "density"):
        if not np.isfinite(normalization_c) or normalization_c <= 0:
            raise UnnormalizedDensityError(f"Normalization constant must be positive and finite: {normalization_c}")
        self.exponent = exponent
        self.normalization_c = float(normalization_c)
        self.is_h_convex = is_h_convex
        self.alpha_lower_bound = alpha_lower_bound
        self.sampler = sampler
        self.support = support
        self.gaussian = gaussian
        self.name = name

    @property
    def dim(self) -> int:
        return self.exponent.dim

    def log_density(self, x) -> np.ndarray:
        return -self.exponent.values(x) - np.log(self.normalization_c)

    def density(self, x) -> np.ndarray:
        with np.errstate(over='ignore'):
            return np.exp(self.log_density(x))

    def __call__(self, x):
        batch, single = as_batch(x, self.dim)
        out = self.density(batch)
        return float(out[0]) if single else out

    def __repr__(self):
        return f"DensitySpec({self.name}, dim={self.dim}, c={self.normalization_c:.6g})"


def uniform_density(dim: int) -> DensitySpec:
    """L ≡ 1."""
    return DensitySpec(
        constant_field(dim, 0.0), 1.0, is_h_convex=True, alpha_lower_bound=0.0,
        sampler=lambda rng, m: rng.standard_normal((m, dim)),
        gaussian=(np.zeros(dim), np.eye(dim)), name="uniform",
    )


def gaussian_ratio_density(mean, cov) -> DensitySpec:
    """Density of N(mean, cov) with respect to N(0, I)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = cov.shape[0]
    mean = np.zeros(n) if mean is None else np.asarray(mean, dtype=float).reshape(n)
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise NotPositiveDefiniteError("Covariance must be symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(f"Covariance is not positive definite: eigenvalues {np.linalg.eigvalsh(cov)}")
    precision = np.linalg.inv(cov)
    precision = 0.5 * (precision + precision.T)
    curvature = precision - np.eye(n)

    def value(x):
        d = x - mean
        return 0.5 * np.einsum('mi,ij,mj->m', d, precision, d) - 0.5 * np.sum(x ** 2, axis=1)

    exponent = ScalarField(
        n, value,
        grad=lambda x: (x - mean) @ precision - x,
        hess=lambda x: np.broadcast_to(curvature, (x.shape[0], n, n)).copy(),
        name="gaussian_ratio_exponent",
    )
    eigs = np.linalg.eigvalsh(curvature)
    alpha = None
    if eigs.min() > 1e-12:
        # f is bounded below; its minimum sits where (P - I)x = P m
        x_star = np.linalg.solve(curvature, precision @ mean)
        alpha = float(-value(x_star[None, :])[0])
    elif eigs.min() >= -1e-12 and not np.any(mean):
        # centered with Σ ≤ I: f = ½x·(P − I)x ≥ 0, flat along the unit directions of Σ
        alpha = 0.0
    c =float(np.sqrt(np.linalg.det(cov)))
    return DensitySpec(
        exponent, c, is_h_convex=bool(eigs.min() >= -CONVEXITY_TOL), alpha_lower_bound=alpha,
        sampler=lambda rng, m: mean + rng.standard_normal((m, n)) @ chol.T,
        gaussian=(mean, cov), name=f"gaussian_ratio(n={n})",
    )


def quartic_density(a: float, dim: int = 1, space: Optional[GaussianSpace] = None) -> DensitySpec:
    """L = e^{-f}/c with f(x) = (a/4)Σxᵢ⁴; convex with f ≥ 0, c by quadrature."""
    if a <= 0:
        raise ValueError(f"Quartic coefficient must be positive: {a}")
    exponent = quartic_field(a, dim)
    space = (space or GaussianSpace(dim=dim)).with_dim(dim)
    c = float(expect(lambda x: np.exp(-exponent.values(x)), space, label="quartic_c").value)
    return DensitySpec(exponent, c, is_h_convex=True, alpha_lower_bound=0.0, name=f"quartic(a={a:g}, n={dim})")


def box_mass(lower, upper) -> float:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return float(np.prod(norm.cdf(upper) - norm.cdf(lower)))


def indicator_density(lower, upper) -> DensitySpec:
    """Density 1_A / μ(A) of the standard Gaussian conditioned on a box A."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape or np.any(lower >= upper):
        raise ValueError(f"Invalid box bounds: lower={lower}, upper={upper}")
    n = lower.size
    mass = box_mass(lower, upper)

    def value(x):
        inside = np.all((x >= lower) & (x <= upper), axis=1)
        return np.where(inside, 0.0, np.inf)

    exponent = ScalarField(
        n, value,
        grad=lambda x: np.zeros_like(x),
        hess=lambda x: np.zeros((x.shape[0], n, n)),
        name="box_indicator_exponent",
    )

    def sampler(rng, m):
        return np.column_stack([
            truncnorm.rvs(lower[j], upper[j], size=m, random_state=rng) for j in range(n)
        ])

    return DensitySpec(exponent, mass, is_h_convex=True, alpha_lower_bound=0.0,
                       sampler=sampler, support=(lower, upper), name=f"indicator({lower}, {upper})")


def gaussian_log_density(x, space: GaussianSpace):
    batch, single = as_batch(x, space.dim)
    out = log_gamma(batch)
    return float(out[0]) if single else out


def log_gamma(x: np.ndarray) -> np.ndarray:
    return -0.5 * x.shape[1] * LOG_2PI - 0.5 * np.sum(x ** 2, axis=1)


@lru_cache(maxsize=32)
def gauss_hermite_nodes(order: int, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Hermite nodes and weights for the standard Gaussian on R^dim."""
    x, w = hermegauss(order)
    w = w / np.sqrt(2.0 * np.pi)
    nodes = np.array(list(itertools.product(x, repeat=dim)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=dim))), axis=1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


@lru_cache(maxsize=32)
def _box_nodes(order: int, lower: tuple, upper: tuple) -> Tuple[np.ndarray, np.ndarray]:
    u, w = leggauss(order)
    u = 0.5 * (u + 1.0)
    w = 0.5 * w
    axes = [truncnorm.ppf(u, lo, hi) for lo, hi in zip(lower, upper)]
    nodes = np.array(list(itertools.product(*axes)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=len(lower)))), axis=1)
    return nodes, weights


def _check_finite(values: np.ndarray, nodes: np.ndarray, overflow: bool = False):
    if np.all(np.isfinite(values)):
        return
    bad = np.argwhere(~np.isfinite(values.reshape(values.shape[0], -1)))[0][0]
    error = QuadratureOverflowError if overflow else NonFiniteValueError
    raise error(f"Integrand is not finite at node {nodes[bad].tolist()}", node=nodes[bad])


def expect(g, space: GaussianSpace, method: Optional[ExpectationMethod] = None,
           label: str = "expect", support: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> ExpectationResult:
    """Gaussian expectation E[g] of a batched integrand or ScalarField.

    Args:
        g: Callable (m, n) -> (m,) or (m, ...), or a ScalarField
        space: Gaussian space fixing dimension and integration settings
        method: Override of the space's method
        label: Tag deriving the Monte Carlo stream from space.seed
        support: Optional box; returns E[g 1_A] with quadrature on the truncated law

    Returns:
        ExpectationResult: value, standard error (0 for quadrature), method, node count
    """
    fn = g.values if isinstance(g, ScalarField) else g
    resolved = space.resolved_method(method)

    if support is not None and resolved == ExpectationMethod.QUADRATURE:
        lower, upper = support
        nodes, weights = _box_nodes(space.quadrature_order, tuple(np.atleast_1d(lower)), tuple(np.atleast_1d(upper)))
        values = np.asarray(fn(nodes), dtype=float)
        _check_finite(values, nodes)
        value = box_mass(lower, upper) * np.tensordot(weights, values, axes=1)
        return ExpectationResult(value=_scalarize(value), stderr=0.0, method=resolved, nodes=len(weights))

    if resolved == ExpectationMethod.QUADRATURE:
        nodes, weights = gauss_hermite_nodes(space.quadrature_order, space.dim)
        values = np.asarray(fn(nodes), dtype=float)
        _check_finite(values, nodes)
        value = np.tensordot(weights, values, axes=1)
        return ExpectationResult(value=_scalarize(value), stderr=0.0, method=resolved, nodes=len(weights))

    rng = make_rng(space.seed, label)
    samples = rng.standard_normal((space.mc_samples, space.dim))
    values = np.asarray(fn(samples), dtype=float)
    if support is not None:
        lower, upper = support
        inside = np.all((samples >= lower) & (samples <= upper), axis=1)
        values = np.where(inside.reshape((-1,) + (1,) * (values.ndim - 1)), values, 0.0)
    _check_finite(values, samples)
    value = values.mean(axis=0)
    stderr = values.std(axis=0, ddof=1) / np.sqrt(values.shape[0]) if values.shape[0] > 1 else np.zeros_like(value)
    return ExpectationResult(value=_scalarize(value), stderr=_scalarize(stderr), method=resolved,
                             nodes=values.shape[0])


def _scalarize(value):
    arr = np.asarray(value)
    return float(arr) if arr.ndim == 0 else arr


def _smoothing_nodes(space: GaussianSpace, dim: int, label: str) -> Tuple[np.ndarray, np.ndarray]:
    if dim <= QUADRATURE_MAX_DIM:
        return gauss_hermite_nodes(space.quadrature_order, dim)
    # frozen Monte Carlo nodes keep the smoothed field a deterministic function
    rng = make_rng(space.seed, label)
    nodes = rng.standard_normal((space.mc_samples, dim))
    return nodes, np.full(nodes.shape[0], 1.0 / nodes.shape[0])


def ou_smooth(g: ScalarField, t: float, space: Optional[GaussianSpace] = None) -> ScalarField:
    """Ornstein-Uhlenbeck semigroup P_t g as a ScalarField.

    Derivatives use ∇P_t g = e^{-t} P_t ∇g and ∇²P_t g = e^{-2t} P_t ∇²g.
    """
    if t < 0:
        raise ValueError(f"Smoothing time must be nonnegative: {t}")
    if t == 0:
        return g
    space = space or GaussianSpace(dim=g.dim)
    n = g.dim
    nodes, weights = _smoothing_nodes(space, n, f"ou:{g.name}")
    a = np.exp(-t)
    b = np.sqrt(-np.expm1(-2.0 * t))

    def shifted(x):
        # (m, q, n) evaluation points flattened for the batched field
        return (a * x[:, None, :] + b * nodes[None, :, :]).reshape(-1, n)

    def value(x):
        pts = shifted(x)
        vals = g.values(pts)
        _check_finite(vals, pts, overflow=True)
        return vals.reshape(x.shape[0], -1) @ weights

    def grad(x):
        vals = g.gradient(shifted(x)).reshape(x.shape[0], -1, n)
        return a * np.einsum('q,mqi->mi', weights, vals)

    def hess(x):
        vals = g.hessian(shifted(x)).reshape(x.shape[0], -1, n, n)
        return a * a * np.einsum('q,mqij->mij', weights, vals)

    return ScalarField(n, value, grad, hess, name=f"P_{t:g}({g.name})")


def ou_apply(g: ScalarField, t: float, x, space: Optional[GaussianSpace] = None):
    """P_t g(x) = ∫ g(e^{-t}x + √(1−e^{-2t}) y) μ(dy)."""
    return ou_smooth(g, t, space)(x)


def conditional_projection(g: ScalarField, keep: int, space: Optional[GaussianSpace] = None) -> ScalarField:
    """E[g | first `keep` coordinates] as a ScalarField on R^keep."""
    n = g.dim
    if not 1 <= keep <= n:
        raise ValueError(f"Projection dimension must be in [1, {n}], got {keep}")
    if keep == n:
        return g
    space = space or GaussianSpace(dim=n)
    nodes, weights = _smoothing_nodes(space, n - keep, f"proj:{g.name}")

    def lifted(x):
        m, q = x.shape[0], nodes.shape[0]
        full = np.empty((m, q, n))
        full[:, :, :keep] = x[:, None, :]
        full[:, :, keep:] = nodes[None, :, :]
        return full.reshape(-1, n)

    def value(x):
        return g.values(lifted(x)).reshape(x.shape[0], -1) @ weights

    def grad(x):
        vals = g.gradient(lifted(x)).reshape(x.shape[0], -1, n)[:, :, :keep]
        return np.einsum('q,mqi->mi', weights, vals)

    def hess(x):
        vals = g.hessian(lifted(x)).reshape(x.shape[0], -1, n, n)[:, :, :keep, :keep]
        return np.einsum('q,mqij->mij', weights, vals)

    return ScalarField(keep, value, grad, hess, name=f"E[{g.name}|V_{keep}]")


def _hessian_eigenvalues(field: ScalarField, grid) -> Tuple[np.ndarray, np.ndarray]:
    batch, _ = as_batch(grid, field.dim)
    if batch.shape[0] == 0:
        raise ValueError("Convexity grid is empty")
    hess = np.atleast_3d(field.hessian(batch))
    if not np.all(np.isfinite(hess)):
        bad = np.argwhere(~np.isfinite(hess.reshape(hess.shape[0], -1)))[0][0]
        raise NonFiniteValueError(f"Hessian of {field.name} is not finite at {batch[bad].tolist()}", node=batch[bad])
    return batch, np.linalg.eigvalsh(hess)


def check_one_convex(phi: ScalarField, grid) -> ConvexityReport:
    """1-convexity of φ: every Hessian eigenvalue is at least -1."""
    batch, eigs = _hessian_eigenvalues(phi, grid)
    lows = eigs.min(axis=1)
    worst = int(np.argmin(lows))
    return ConvexityReport(
        holds=bool(lows[worst] >= -1.0 - CONVEXITY_TOL),
        worst_eigenvalue=float(lows[worst]),
        worst_point=batch[worst].tolist(),
        best_eigenvalue=float(eigs.max()),
    )


def check_h_convex(f: ScalarField, grid) -> ConvexityReport:
    batch, eigs = _hessian_eigenvalues(f, grid)
    lows = eigs.min(axis=1)
    worst = int(np.argmin(lows))
    return ConvexityReport(
        holds=bool(lows[worst] >= -CONVEXITY_TOL),
        worst_eigenvalue=float(lows[worst]),
        worst_point=batch[worst].tolist(),
        best_eigenvalue=float(eigs.max()),
    )


def check_h_log_concave(L: DensitySpec, grid) -> ConvexityReport:
    """Convexity of the exponent f of L on the grid points where L is positive."""
    batch, _ = as_batch(grid, L.dim)
    finite = np.isfinite(L.exponent.values(batch))
    if not finite.any():
        raise ValueError("No grid point lies in the support of the density")
    return check_h_convex(L.exponent, batch[finite])


def normalization_check(L: DensitySpec, space: GaussianSpace) -> ExpectationResult:
    result = expect(L.density, space, label=f"norm:{L.name}", support=L.support)
    tol = max(NORMALIZATION_TOL, 4.0 * float(np.max(result.stderr)))
    if abs(result.value - 1.0) > tol:
        raise UnnormalizedDensityError(
            f"E[L] = {result.value:.6f} deviates from 1 by more than {tol:.1e} for {L.name}"
        )
    return result


def relative_entropy(L: DensitySpec, space: Optional[GaussianSpace] = None) -> ExpectationResult:
    """E[L log L] under μ, with 0 log 0 = 0."""
    space = space or GaussianSpace(dim=L.dim)
    if space.dim != L.dim:
        raise DimensionMismatchError(f"Density lives in R^{L.dim}, space in R^{space.dim}")
    normalization_check(L, space)

    def integrand(x):
        values = L.density(x)
        return xlogy(values, values)

    return expect(integrand, space, label=f"entropy:{L.name}", support=L.support)


def smoothed_density(L: DensitySpec, t: float, keep: int, space: Optional[GaussianSpace] = None) -> DensitySpec:
    """The density E[P_t L | V_keep] on R^keep.

    Gaussian targets stay Gaussian: covariance e^{-2t}Σ + (1 − e^{-2t})I, mean e^{-t}m,
    restricted to the leading block. Other densities go through the exponent
    f_k = −log E[P_t e^{-f} | V_k] with c_k = c.
    """
    if L.gaussian is not None:
        mean, cov = L.gaussian
        decay = np.exp(-t)
        cov_t = decay ** 2 * cov + (1.0 - decay ** 2) * np.eye(L.dim)
        return gaussian_ratio_density(decay * mean[:keep], cov_t[:keep, :keep])
    space = space or GaussianSpace(dim=L.dim)
    # E[P_t g | V_k] = P_t^{(k)} E[g | V_k] since the semigroup acts coordinatewise
    projected = conditional_projection(exp_neg(L.exponent), keep, space)
    smoothed = ou_smooth(projected, t, space.with_dim(keep))
    exponent = neg_log(smoothed)
    exponent.name = f"f_{keep}(t={t:g})"
    alpha = L.alpha_lower_bound
    return DensitySpec(exponent, L.normalization_c, is_h_convex=L.is_h_convex,
                       alpha_lower_bound=alpha, name=f"smoothed({L.name}, t={t:g}, k={keep})")


def sample_target(L: DensitySpec, m: int, seed: int, label: str = "target") -> np.ndarray:
    """Draw m samples of L·μ: the density's own sampler, or rejection from μ when α is known."""
    rng = make_rng(seed, label)
    if L.sampler is not None:
        return np.asarray(L.sampler(rng, m), dtype=float).reshape(m, L.dim)
    if L.alpha_lower_bound is None:
        raise HypothesisError(f"No sampler and no lower bound on the exponent for {L.name}")
    accepted = []
    total = 0
    for _ in range(1000):
        proposal = rng.standard_normal((max(m, 1024), L.dim))
        accept_prob = np.exp(-L.exponent.values(proposal) - L.alpha_lower_bound)
        keep = rng.random(proposal.shape[0]) < accept_prob
        accepted.append(proposal[keep])
        total += int(keep.sum())
        if total >= m:
            break
    if total < m:
        raise HypothesisError(f"Rejection sampling produced only {total} of {m} samples for {L.name}")
    return np.concatenate(accepted)[:m]


def probe_grid(dim: int, radius: float = 3.0, points_per_axis: Optional[int] = None) -> np.ndarray:
    """Regular grid of test points in [-radius, radius]^dim."""
    per_axis = points_per_axis or {1: 61, 2: 15, 3: 7}.get(dim, 5)
    axis = np.linspace(-radius, radius, per_axis)
    return np.array(list(itertools.product(axis, repeat=dim)))


