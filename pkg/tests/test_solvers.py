import numpy as np
import pytest

from common.errors import DimensionMismatchError, UnnormalizedDensityError
from transport.gauss_core import DensitySpec, gaussian_ratio_density, quadratic_field, uniform_density
from transport.solvers.cdf_solver import QuantileTable, solve_1d
from transport.solvers.discrete_solver import (
    brute_force_assignment,
    coupling_map,
    permutation_cost,
    solve_discrete,
)
from transport.solvers.entropic_solver import default_schedule, sinkhorn_log, solve_grid_entropic


def test_quantile_table_tails_keep_relative_accuracy(half_gaussian):
    table = QuantileTable(half_gaussian, 10.0, 40001)
    x = np.array([-6.0, -4.0, 4.0, 6.0])
    assert np.allclose(table.quantile_of_normal(x), 0.5 * x, rtol=1e-5)
    assert np.allclose(table.normal_of_quantile(0.5 * x), x, rtol=1e-5)


def test_quantile_table_rejects_mass_outside_table():
    wide = gaussian_ratio_density(None, [[9.0]])
    with pytest.raises(UnnormalizedDensityError):
        QuantileTable(wide, 4.0, 2001)


def test_solve_1d_rejects_plane_density(uniform_2d):
    with pytest.raises(DimensionMismatchError):
        solve_1d(uniform_2d)


def test_solve_1d_identity_for_uniform_density(space_1d):
    solution = solve_1d(uniform_density(1), space=space_1d)
    x = np.linspace(-3.0, 3.0, 7)
    assert np.allclose(solution.forward_map(x)[:, 0], x, atol=1e-6)
    assert solution.cost == pytest.approx(0.0, abs=1e-10)


def test_solve_1d_potential_hessian(half_gaussian, space_1d):
    solution = solve_1d(half_gaussian, space=space_1d)
    # T' = 1/2 so ∇²φ = −1/2
    hess = solution.phi.hessian(np.array([[-1.0], [0.0], [1.5]]))
    assert np.allclose(hess, -0.5, atol=1e-5)


def test_solve_discrete_identity_assignment():
    atoms = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    coupling = solve_discrete(atoms, atoms)
    assert list(coupling.assignment) == [0, 1, 2]
    assert coupling.cost == pytest.approx(0.0)
    assert np.allclose(coupling_map(coupling)(atoms[1:]), atoms[1:])


def test_solve_discrete_rejects_shape_mismatch():
    with pytest.raises(DimensionMismatchError):
        solve_discrete(np.zeros((3, 2)), np.zeros((4, 2)))


def test_brute_force_assignment_on_line():
    source = np.array([0.0, 1.0, 2.0])
    target = np.array([2.1, 0.1, 1.1])
    perm, cost = brute_force_assignment(source, target)
    assert list(perm) == [1, 2, 0]
    assert cost == pytest.approx(permutation_cost(source, target, perm))
    assert cost == pytest.approx(0.01)


def test_coupling_map_rejects_foreign_points():
    atoms = np.array([[0.0], [1.0]])
    apply = coupling_map(solve_discrete(atoms, atoms))
    with pytest.raises(ValueError):
        apply(np.array([[0.5]]))


def test_default_schedule_ends_below_cell_volume():
    schedule = default_schedule(0.2)
    assert schedule[0] == 1.0
    assert schedule[-1] == pytest.approx(2e-4)
    assert all(b < a for a, b in zip(schedule, schedule[1:]))


def test_sinkhorn_recovers_identity_plan():
    points = np.array([0.0, 1.0, 2.0])
    weights = np.full(3, 1.0 / 3.0)
    cost = 0.5 * (points[:, None] - points[None, :]) ** 2
    plan, info = sinkhorn_log(weights, weights, cost, [1.0, 0.1, 0.01])
    assert np.allclose(plan, np.eye(3) / 3.0, atol=1e-9)
    assert info["residual"] < 1e-7


def test_grid_solver_validates_options(half_gaussian):
    with pytest.raises(ValueError):
        solve_grid_entropic(half_gaussian, bound=4.0)
    with pytest.raises(ValueError):
        solve_grid_entropic(half_gaussian, resolution=31, derivative_window=6)
    with pytest.raises(ValueError):
        solve_grid_entropic(half_gaussian, resolution=31, epsilon_schedule=[1.0])


def test_grid_solver_rejects_three_dimensions():
    L = DensitySpec(quadratic_field(np.zeros((3, 3))), 1.0)
    with pytest.raises(DimensionMismatchError):
        solve_grid_entropic(L)


def test_grid_solver_cost_is_cost_of_returned_map(half_gaussian):
    solution = solve_grid_entropic(half_gaussian, resolution=31)
    axis = np.linspace(-6.0, 6.0, 31)[:, None]
    weights = np.exp(-0.5 * axis[:, 0] ** 2)
    weights /= weights.sum()
    displacement = solution.forward_map(axis) - axis
    assert solution.cost == pytest.approx(float(weights @ np.sum(displacement ** 2, axis=1)), rel=1e-9)
    # barycentric projection never spreads more than the plan it averages
    assert solution.cost <= solution.diagnostics["plan_cost"] + 1e-12


@pytest.mark.slow
def test_grid_solver_approximates_monotone_map(half_gaussian):
    solution = solve_grid_entropic(half_gaussian, resolution=61)
    x = np.linspace(-2.0, 2.0, 9)
    assert np.abs(solution.forward_map(x)[:, 0] - 0.5 * x).max() < 0.15
    assert solution.cost == pytest.approx(0.25, abs=0.05)
    assert solution.diagnostics["marginal_residual"] < 1e-6
