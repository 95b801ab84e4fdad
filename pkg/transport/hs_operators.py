"""
Linear perturbations of the identity on the Gaussian space.

Carleman-Fredholm determinants, the polar decomposition of I + K, the density
Λ_K of the linear shift x ↦ (I + K)x, divergences of constant operators and the
square-root operator carrying μ to a Gaussian target.
"""
import logging
from typing import Callable, Tuple

import numpy as np
import scipy.linalg

from common.errors import (
    DimensionMismatchError,
    InternalConsistencyError,
    NotPositiveDefiniteError,
    OperatorNotInvertibleError,
)
from common.models import PerturbationOperator, PolarParts
from config import INVERTIBILITY_TOL, POLAR_TOL
from transport.gauss_core import ScalarField, as_batch, log_gamma, quadratic_field

logger = logging.getLogger(__name__)


def as_operator(k) -> PerturbationOperator:
    if isinstance(k, PerturbationOperator):
        return k
    return PerturbationOperator(matrix=k)


def det2(k) -> float:
    """det₂(I + K) = Π (1 + λᵢ) e^{−λᵢ} over the eigenvalues of K."""
    op = as_operator(k)
    eigs = np.linalg.eigvals(op.matrix).astype(complex)
    factors = (1.0 + eigs) * np.exp(-eigs)
    return float(np.real(np.prod(factors)))


def det2_lu(k) -> float:
    """det(I + K)·exp(−trace K) through an LU factorization."""
    op = as_operator(k)
    lu, piv = scipy.linalg.lu_factor(op.identity_plus, check_finite=True)
    swaps = np.sum(piv != np.arange(op.dim))
    det = (-1.0) ** swaps * np.prod(np.diag(lu))
    return float(det * np.exp(-np.trace(op.matrix)))


def log_det2_symmetric(hess: np.ndarray) -> np.ndarray:
    """log det₂(I + H) for a batch of symmetric matrices with eigenvalues > −1."""
    eigs = np.linalg.eigvalsh(hess)
    return np.sum(np.log1p(eigs) - eigs, axis=-1)


def _require_invertible(op: PerturbationOperator) -> np.ndarray:
    singular_values = np.linalg.svd(op.identity_plus, compute_uv=False)
    if singular_values.min() <= INVERTIBILITY_TOL * max(1.0, singular_values.max()):
        raise OperatorNotInvertibleError(smallest_singular_value=float(singular_values.min()))
    return singular_values


def polar_decompose(k) -> PolarParts:
    """I + K = (I + K̄)(I + A) from the SVD U S Vᵀ of I + K.

    Raises:
        OperatorNotInvertibleError: if I + K is singular
        InternalConsistencyError: if the factors do not recompose I + K or I + A is not an isometry
    """
    op = as_operator(k)
    _require_invertible(op)
    u, s, vt = np.linalg.svd(op.identity_plus)
    eye = np.eye(op.dim)
    positive = (u * s) @ u.T
    kbar = 0.5 * (positive + positive.T) - eye
    parts = PolarParts(kbar=kbar, a=u @ vt - eye)
    residuals = parts.residuals(op.matrix)
    limit = POLAR_TOL * max(1.0, np.linalg.norm(op.identity_plus))
    for name in ("recomposition", "isometry", "symmetry"):
        if residuals[name] > limit:
            raise InternalConsistencyError(f"Polar {name} residual {residuals[name]:.3e} exceeds {limit:.1e}")
    return parts


def divergence_shift(k, x) -> np.ndarray:
    """δK(x) = Kx."""
    op = as_operator(k)
    batch, single = as_batch(x, op.dim)
    out = batch @ op.matrix.T
    return out[0] if single else out


def second_divergence(k, x):
    """δ²K(x) = x·Kx − trace K."""
    op = as_operator(k)
    batch, single = as_batch(x, op.dim)
    out = np.einsum('mi,ij,mj->m', batch, op.matrix, batch) - np.trace(op.matrix)
    return float(out[0]) if single else out


def lambda_K(k, x):
    """Λ_K(x) = det₂(I + K)·exp(−δ²K(x) − ½|Kx|²).

    Equals det(I + K)·γ((I + K)x)/γ(x), so ∫ g((I+K)x)|Λ_K(x)| μ(dx) = ∫ g dμ.
    """
    op = as_operator(k)
    _require_invertible(op)
    batch, single = as_batch(x, op.dim)
    shift = batch @ op.matrix.T
    exponent = -second_divergence(op, batch) - 0.5 * np.sum(shift ** 2, axis=1)
    out = det2(op) * np.exp(exponent)
    return float(out[0]) if single else out


def pushforward_density(k, y):
    """dUμ/dμ(y) for U = I + K, computed from the Gaussian law N(0, UUᵀ)."""
    op = as_operator(k)
    _require_invertible(op)
    batch, single = as_batch(y, op.dim)
    u = op.identity_plus
    pre_image = np.linalg.solve(u, batch.T).T
    _, logabsdet = np.linalg.slogdet(u)
    out = np.exp(log_gamma(pre_image) - logabsdet - log_gamma(batch))
    return float(out[0]) if single else out


def linear_forward_potential(k) -> ScalarField:
    """φ(x) = ½ δ²K̄(x) = ½(x·K̄x − trace K̄) with K̄ the positive part of I + K."""
    matrix = polar_decompose(k).kbar
    _check_positive_shift(matrix)
    return quadratic_field(matrix, constant=-0.5 * np.trace(matrix), name="linear_phi")


def linear_backward_potential(k) -> ScalarField:
    """ψ(y) = −½ δ²M(y) with M = (I + K̄)⁻¹K̄."""
    matrix = polar_decompose(k).kbar
    _check_positive_shift(matrix)
    m = np.linalg.solve(np.eye(matrix.shape[0]) + matrix, matrix)
    m = 0.5 * (m + m.T)
    return quadratic_field(-m, constant=0.5 * np.trace(m), name="linear_psi")


def _check_positive_shift(matrix: np.ndarray):
    if not np.allclose(matrix, matrix.T, atol=1e-10):
        raise ValueError("Potential operator must be symmetric")
    low = np.linalg.eigvalsh(0.5 * (matrix + matrix.T)).min()
    if low <= -1.0 + INVERTIBILITY_TOL:
        raise OperatorNotInvertibleError(smallest_singular_value=float(1.0 + low))


def gaussian_target_operator(cov) -> PerturbationOperator:
    """N = Σ^{1/2} − I, so that (I + N)x ~ N(0, Σ) when x ~ N(0, I)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DimensionMismatchError(f"Covariance must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise NotPositiveDefiniteError("Covariance is not symmetric")
    eigs, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if eigs.min() < -1e-12:
        raise NotPositiveDefiniteError(f"Covariance is indefinite: smallest eigenvalue {eigs.min():.3e}")
    root = (vecs * np.sqrt(np.clip(eigs, 0.0, None))) @ vecs.T
    root = 0.5 * (root + root.T)
    return PerturbationOperator(matrix=root - np.eye(cov.shape[0]))


def linear_map(matrix, offset=None) -> Callable[[np.ndarray], np.ndarray]:
    """x ↦ offset + Mx on batches."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    offset = np.zeros(matrix.shape[0]) if offset is None else np.asarray(offset, dtype=float)

    def apply(x):
        batch, single = as_batch(x, matrix.shape[1])
        out = batch @ matrix.T + offset
        return out[0] if single else out

    return apply


def random_operator(dim: int, rng: np.random.Generator, scale: float = 0.5, min_singular: float = 0.1) -> np.ndarray:
    """A random K whose I + K has every singular value above min_singular."""
    while True:
        k = scale * rng.standard_normal((dim, dim))
        if np.linalg.svd(np.eye(dim) + k, compute_uv=False).min() > min_singular:
            return k


def polar_parts_from_svd(k) -> Tuple[np.ndarray, np.ndarray]:
    """Positive part U S Uᵀ and isometry U Vᵀ of I + K from scipy's polar routine."""
    op = as_operator(k)
    isometry, positive = scipy.linalg.polar(op.identity_plus, side='left')
    return positive, isometry
