"""
Exact transport between equal-weight atom clouds.
"""
import itertools
import logging
from typing import Callable, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from common.errors import DimensionMismatchError
from common.models import DiscreteCoupling

logger = logging.getLogger(__name__)

MAX_ATOMS = 200
MAX_BRUTE_FORCE = 8


def _atoms(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def _check_pair(source: np.ndarray, target: np.ndarray):
    if source.shape != target.shape:
        raise DimensionMismatchError(f"Atom sets differ in shape: {source.shape} vs {target.shape}")
    if len(source) > MAX_ATOMS:
        raise ValueError(f"At most {MAX_ATOMS} atoms supported, got {len(source)}")


def permutation_cost(source, target, assignment) -> float:
    """(1/m)Σ|xᵢ − y_{σ(i)}|²."""
    source, target = _atoms(source), _atoms(target)
    return float(np.mean(np.sum((source - target[np.asarray(assignment)]) ** 2, axis=1)))


def solve_discrete(source, target) -> DiscreteCoupling:
    """Optimal matching of two equal-weight clouds under the squared distance.

    Args:
        source: (m, n) atoms of ρ
        target: (m, n) atoms of ν

    Returns:
        DiscreteCoupling: permutation plan with mass 1/m per matched pair
    """
    source, target = _atoms(source), _atoms(target)
    _check_pair(source, target)
    m = len(source)
    rows, cols = linear_sum_assignment(cdist(source, target, 'sqeuclidean'))
    assignment = np.empty(m, dtype=int)
    assignment[rows] = cols
    plan = np.zeros((m, m))
    plan[rows, cols] = 1.0 / m
    weights = np.full(m, 1.0 / m)
    cost = permutation_cost(source, target, assignment)
    logger.debug(f"Discrete assignment of {m} atoms: cost={cost:.6g}")
    return DiscreteCoupling(source_atoms=source, target_atoms=target, source_weights=weights,
                            target_weights=weights.copy(), plan=plan, assignment=assignment, cost=cost)


def brute_force_assignment(source, target) -> Tuple[np.ndarray, float]:
    """Minimum-cost permutation by exhaustive search."""
    source, target = _atoms(source), _atoms(target)
    _check_pair(source, target)
    if len(source) > MAX_BRUTE_FORCE:
        raise ValueError(f"Brute force limited to {MAX_BRUTE_FORCE} atoms, got {len(source)}")
    costs = cdist(source, target, 'sqeuclidean')
    index = np.arange(len(source))
    best, best_cost = None, np.inf
    for perm in itertools.permutations(index):
        c = costs[index, perm].mean()
        if c < best_cost:
            best, best_cost = np.array(perm), float(c)
    return best, best_cost


def brute_force_min_rotation(source, image) -> Tuple[np.ndarray, float]:
    """Permutation R of the source atoms minimizing (1/m)Σ|U(xᵢ) − x_{R(i)}|².

    Equal-weight ρ-rotations are exactly the atom permutations, so the
    exhaustive search covers every measure-preserving map.
    """
    return brute_force_assignment(image, source)


def coupling_map(coupling: DiscreteCoupling) -> Callable[[np.ndarray], np.ndarray]:
    """Atom-level map x_i ↦ y_{σ(i)} defined on the source atoms only."""
    if coupling.assignment is None:
        raise ValueError("Coupling is not a permutation")
    lookup = {tuple(np.round(x, 12)): coupling.target_atoms[j]
              for x, j in zip(coupling.source_atoms, coupling.assignment)}

    def apply(x):
        pts = _atoms(x)
        try:
            return np.array([lookup[tuple(np.round(p, 12))] for p in pts])
        except KeyError as e:
            raise ValueError(f"Point {e.args[0]} is not a source atom") from e

    return apply
