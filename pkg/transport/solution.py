"""Transport solutions: potentials, maps and their solver diagnostics."""
import logging
from typing import Any, Callable, Dict, Optional

import numpy as np

from common.models import SolverKind
from transport.gauss_core import DensitySpec, ScalarField, as_batch

logger = logging.getLogger(__name__)


def batch_map(dim: int, fn: Callable[[np.ndarray], np.ndarray], name: str = "map") -> Callable:
    """Wrap a batched map (m, n) -> (m, n) so it also accepts single points."""
    def apply(x):
        batch, single = as_batch(x, dim)
        out = np.asarray(fn(batch), dtype=float).reshape(batch.shape[0], dim)
        return out[0] if single else out

    apply.__name__ = name
    return apply


class TransportSolution:
    """Optimal transport of μ onto L·μ: T = I + ∇φ, S = T⁻¹ = I + ∇ψ.

    Args:
        phi: Forward potential
        psi: Backward potential
        forward_map: T on batches
        inverse_map: S on batches
        cost: d_H² = E|T(x) − x|²
        solver: Which solver produced the solution
        target: The density that was transported to, when known
        diagnostics: Solver-specific numbers (residuals, iteration counts, ...)
    """

    def __init__(self, phi: ScalarField, psi: ScalarField, forward_map: Callable, inverse_map: Callable,
                 cost: float, solver: SolverKind, target: Optional[DensitySpec] = None,
                 diagnostics: Optional[Dict[str, Any]] = None):
        self.phi = phi
        self.psi = psi
        self.forward_map = forward_map
        self.inverse_map = inverse_map
        self.cost = float(cost)
        self.solver = SolverKind(solver)
        self.target = target
        self.diagnostics = diagnostics or {}

    @property
    def dim(self) -> int:
        return self.phi.dim

    def displacement(self, x) -> np.ndarray:
        return self.phi.gradient(x)

    def gradient_residual(self, x) -> float:
        """max |T(x) − x − ∇φ(x)| over the batch."""
        batch, _ = as_batch(x, self.dim)
        return float(np.abs(self.forward_map(batch) - batch - self.phi.gradient(batch)).max())

    def __repr__(self):
        return f"TransportSolution(solver={self.solver.value}, dim={self.dim}, cost={self.cost:.6g})"


def backward_potential(phi: ScalarField, inverse_map: Callable, inverse_hessian: Optional[Callable] = None) -> ScalarField:
    """ψ(y) = −φ(S(y)) − ½|y − S(y)|², the equality case of the duality contract.

    The gradient is S(y) − y; the Hessian is S'(y) − I when given.
    """
    n = phi.dim

    def value(y):
        s = inverse_map(y)
        return -phi.values(s) - 0.5 * np.sum((y - s) ** 2, axis=1)

    def grad(y):
        return inverse_map(y) - y

    hess = None
    if inverse_hessian is not None:
        def hess(y):
            return inverse_hessian(y) - np.eye(n)[None, :, :]

    return ScalarField(n, value, grad, hess, name=f"psi[{phi.name}]")
