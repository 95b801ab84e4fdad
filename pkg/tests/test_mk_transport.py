import numpy as np
import pytest

from common.errors import NotPositiveDefiniteError, OperatorNotInvertibleError
from common.models import GaussianSpace, PolarBackend, SolverKind
from transport.gauss_core import gaussian_ratio_density, probe_grid
from transport.hs_operators import linear_map, random_operator
from transport.mk_transport import (
    approximation_ladder,
    brute_force_assignment,
    brute_force_min_rotation,
    check_cyclic_monotonicity,
    cost_lower_bound,
    duality_gap,
    inverse_consistency,
    polar_factorize,
    pushforward_ks,
    random_cycles,
    right_inverse_check,
    solve_1d,
    solve_density,
    solve_discrete,
    solve_gaussian,
)


def test_solve_gaussian_shifted_cost():
    # |Σ^{1/2} − I|² + |m|² = 2·(1/2)² + 1
    solution = solve_gaussian(np.eye(2) / 4, mean=[1.0, 0.0])
    assert solution.solver == SolverKind.GAUSSIAN_CLOSED_FORM
    assert solution.cost == pytest.approx(1.5, abs=1e-12)
    assert np.allclose(solution.forward_map([2.0, -2.0]), [2.0, -1.0])


def test_solve_gaussian_rejects_indefinite_covariance():
    with pytest.raises(NotPositiveDefiniteError):
        solve_gaussian([[1.0, 0.0], [0.0, -0.5]])


def test_solve_gaussian_potentials_are_consistent():
    solution = solve_gaussian([[0.5, 0.1], [0.1, 0.3]])
    x = probe_grid(2)
    assert solution.gradient_residual(x) < 1e-12
    gaps = duality_gap(solution, x, (x, x[::-1] * 0.7))
    assert gaps.on_graph_max < 1e-10
    assert gaps.off_graph_min > -1e-10
    inverse = inverse_consistency(solution, x, x)
    assert max(inverse.forward_error, inverse.backward_error) < 1e-10


def test_solve_1d_matches_gaussian_closed_form(half_gaussian, space_1d):
    solution = solve_1d(half_gaussian, space=space_1d)
    x = np.linspace(-3.0, 3.0, 13)
    assert np.allclose(solution.forward_map(x)[:, 0], 0.5 * x, atol=1e-6)
    # (s − 1)²
    assert solution.cost == pytest.approx(0.25, abs=1e-6)
    assert inverse_consistency(solution, x).forward_error < 1e-6


def test_solve_1d_indicator_stays_in_support(unit_interval, space_1d):
    solution = solve_1d(unit_interval, space=space_1d)
    image = solution.forward_map(np.linspace(-5.0, 5.0, 101))
    assert image.min() >= -1.0 - 1e-9
    assert image.max() <= 1.0 + 1e-9
    assert np.all(np.diff(image[:, 0]) >= 0)


def test_solve_density_dispatch(half_gaussian, quartic_1d):
    assert solve_density(half_gaussian).solver == SolverKind.GAUSSIAN_CLOSED_FORM
    assert solve_density(quartic_1d).solver == SolverKind.CDF_1D


def test_cyclic_monotonicity_of_gradient_map():
    solution = solve_gaussian([[0.5, 0.1], [0.1, 0.3]])
    cycles = random_cycles(2, 200, 4, seed=1)
    report = check_cyclic_monotonicity(solution, cycles)
    assert report.holds
    assert report.cycles == 200


def test_cyclic_monotonicity_detects_rotation():
    # a quarter turn is measure-preserving but not a gradient map
    turn = linear_map([[0.0, -1.0], [1.0, 0.0]])
    report = check_cyclic_monotonicity(turn, random_cycles(2, 200, 3, seed=2))
    assert not report.holds
    assert report.worst_slack > 0


def test_optimal_cost_beats_reflected_map():
    solution = solve_gaussian(np.diag([0.5, 0.7]))
    cost, competitor = cost_lower_bound(solution, lambda x: solution.forward_map(-x))
    assert cost < competitor


def test_pushforward_ks_accepts_gaussian_target():
    solution = solve_gaussian([[0.5, 0.1], [0.1, 0.3]])
    report = pushforward_ks(solution, m=4000, seed=6)
    assert report.passed
    assert report.samples == 4000


def test_approximation_ladder_for_gaussian_target():
    L = gaussian_ratio_density(None, np.diag([0.5, 0.6, 0.7]))
    space = GaussianSpace(dim=3, quadrature_order=12)
    solutions, rungs = approximation_ladder(L, [1, 2, 3], space)
    assert [r.dim for r in rungs] == [1, 2, 3]
    errors = [r.gradient_error for r in rungs]
    assert errors[0] > errors[-1]
    assert len(solutions) == 3


def test_solve_discrete_matches_brute_force(rng):
    for _ in range(10):
        source = rng.standard_normal((6, 2))
        target = rng.standard_normal((6, 2))
        coupling = solve_discrete(source, target)
        _, best = brute_force_assignment(source, target)
        assert coupling.cost == pytest.approx(best, abs=1e-12)
        assert coupling.marginal_residual() < 1e-12


def test_polar_factorize_linear(rng):
    k = random_operator(3, rng)
    factorization = polar_factorize(k, PolarBackend.LINEAR)
    x = rng.standard_normal((10, 3))
    u = x @ (np.eye(3) + k).T
    assert np.allclose(factorization.transport(factorization.rotation(x)), u, atol=1e-10)
    assert factorization.cost_gap < 1e-10


def test_polar_factorize_discrete(rng):
    source = rng.standard_normal((6, 2))
    image = source @ np.array([[1.2, 0.4], [-0.3, 0.8]]).T
    factorization = polar_factorize(image, PolarBackend.DISCRETE, source=source)
    _, best_rotation = brute_force_min_rotation(source, image)
    assert factorization.rotation_cost == pytest.approx(best_rotation, abs=1e-12)
    assert factorization.cost_gap < 1e-12
    assert np.allclose(factorization.transport(factorization.rotation(source)), image)


def test_polar_factorize_discrete_rejects_merging_map(rng):
    source = rng.standard_normal((4, 2))
    image = np.vstack([source[:2], source[:2]])
    with pytest.raises(OperatorNotInvertibleError):
        polar_factorize(image, PolarBackend.DISCRETE, source=source)


def test_polar_factorize_monotone_1d():
    factorization = polar_factorize(lambda x: -2.0 * x, PolarBackend.MONOTONE_1D, m=5000, seed=3)
    assert factorization.details["rotation_ks"].passed
    # the optimal part is x ↦ 2x, the rotation is the reflection
    assert factorization.transport(np.array([0.0]))[0, 0] == pytest.approx(0.0, abs=0.1)


def test_right_inverse_check():
    solution = solve_gaussian(np.diag([0.5, 2.0]))
    x = probe_grid(2)
    assert right_inverse_check(solution.forward_map, solution.inverse_map, x)
    assert not right_inverse_check(solution.forward_map, lambda y: y, x)
