import numpy as np
import pytest

from common.errors import HypothesisError, MapNotMonotoneError
from common.models import GaussianSpace
from transport.gauss_core import box_mass, gaussian_ratio_density, probe_grid, quadratic_field, uniform_density
from transport.mk_transport import solve_1d, solve_gaussian
from transport.monge_ampere import (
    caffarelli_check,
    convex_set_mass,
    distance_identity,
    free_energy_via_det2,
    interpolation_bound,
    jacobian,
    jacobian_report,
    log_det2_convexity_gap,
    log_jacobian_expansion,
    ma_residual,
    ou_operator,
    random_symmetric_above,
    regularity_bound,
    subsolution_check,
    talagrand_check,
)

S = 0.5


@pytest.fixture
def half_solution():
    return solve_gaussian([[S ** 2]])


def test_ou_operator_of_quadratic():
    phi = quadratic_field([[-0.5]])
    # x·∇φ − Δφ = −x²/2 + 1/2
    assert ou_operator(phi, 2.0) == pytest.approx(-1.5)


def test_jacobian_closed_form(half_solution):
    # T(x) = sx gives Λ(x) = s·exp((1 − s²)x²/2)
    assert jacobian(half_solution.phi, 0.0) == pytest.approx(S, rel=1e-12)
    assert jacobian(half_solution.phi, 1.0) == pytest.approx(0.7274957, rel=1e-6)


def test_jacobian_rejects_non_monotone_map():
    with pytest.raises(MapNotMonotoneError) as excinfo:
        jacobian(quadratic_field([[-2.0]]), 0.5)
    assert excinfo.value.eigenvalue == pytest.approx(-2.0)


def test_ma_residual_gaussian_and_cdf_solvers(half_gaussian, space_1d, half_solution):
    grid = probe_grid(1)
    assert ma_residual(half_solution, half_gaussian, grid) < 1e-10
    cdf = solve_1d(half_gaussian, space=space_1d)
    assert ma_residual(cdf, half_gaussian, grid) < 1e-8


def test_ma_residual_two_dimensional(correlated_gaussian):
    solution = solve_gaussian([[0.5, 0.1], [0.1, 0.3]])
    assert ma_residual(solution, correlated_gaussian, probe_grid(2)) < 1e-10


def test_ma_residual_requires_log_concavity():
    wide = gaussian_ratio_density(None, [[4.0]])
    with pytest.raises(HypothesisError):
        ma_residual(solve_gaussian([[4.0]]), wide, probe_grid(1))


def test_subsolution_for_quartic_target(quartic_1d, space_1d):
    solution = solve_1d(quartic_1d, space=space_1d)
    holds, worst = subsolution_check(solution, quartic_1d, probe_grid(1))
    assert holds
    assert worst == pytest.approx(1.0, abs=1e-6)


def test_subsolution_flags_mismatched_potential(half_solution):
    # T = x/2 against L ≡ 1 gives Λ·L∘T = ½exp(3x²/8), above 1 away from the origin
    holds, worst = subsolution_check(half_solution, uniform_density(1), probe_grid(1))
    assert not holds
    assert worst > 2.0


def test_distance_identity(half_solution, half_gaussian, space_1d):
    half, rhs = distance_identity(half_solution, half_gaussian, space_1d)
    assert half.value == pytest.approx(0.125, abs=1e-12)
    # ½(s² − 1 − log s²) + log s + 1 − s
    assert rhs.value == pytest.approx(0.318147 - 0.193147, abs=1e-6)


def test_regularity_bound(half_solution, half_gaussian, space_1d):
    lhs, rhs = regularity_bound(half_solution, half_gaussian, space_1d)
    assert lhs.value == pytest.approx(0.5, abs=1e-12)
    assert lhs.value <= rhs.value


def test_talagrand(half_solution, half_gaussian, space_1d):
    report = talagrand_check(half_solution, half_gaussian, space_1d)
    assert report.holds
    assert report.log_det_mean == pytest.approx(np.log(S) + 1.0 - S, abs=1e-12)
    assert report.distance_sq == pytest.approx(0.25, abs=1e-12)


def test_free_energy(half_solution, half_gaussian, space_1d):
    lhs, rhs = free_energy_via_det2(half_solution, half_gaussian, space_1d)
    assert lhs == pytest.approx(np.log(2.0))
    assert rhs.value == pytest.approx(np.log(2.0), abs=1e-10)


def test_caffarelli_contraction(half_solution):
    holds, (lo, hi) = caffarelli_check(half_solution, probe_grid(1))
    assert holds
    assert lo == pytest.approx(-0.5) and hi == pytest.approx(-0.5)
    wide = solve_gaussian([[4.0]])
    assert not caffarelli_check(wide, probe_grid(1))[0]


def test_convex_set_mass(space_1d):
    mass, lam, formula, spread = convex_set_mass([-1.0], [1.0], probe_grid(1), space_1d)
    assert mass == pytest.approx(box_mass([-1.0], [1.0]))
    assert lam == pytest.approx(mass, abs=1e-8)
    assert spread < 1e-8
    assert formula == pytest.approx(mass, abs=1e-3)


def test_convex_set_mass_refuses_tiny_sets():
    with pytest.raises(HypothesisError):
        convex_set_mass([4.0], [5.0], probe_grid(1))


def test_interpolation_bound(half_solution, half_gaussian):
    rows = interpolation_bound(half_solution, half_gaussian, [0.0, 0.5, 1.0], probe_grid(1))
    assert all(row.holds and row.entropy_inequality_holds for row in rows)
    # density at the image of 0 is 1/(1 − t/2), reaching the bound 1/c = 2 at t = 1
    assert rows[-1].max_density == pytest.approx(2.0, rel=1e-10)


def test_interpolation_bound_needs_exponent_bound(half_solution):
    wide = gaussian_ratio_density(None, [[4.0]])
    with pytest.raises(HypothesisError):
        interpolation_bound(half_solution, wide, [0.5], probe_grid(1))


def test_log_det2_convexity(rng):
    for a in random_symmetric_above(3, 50, rng):
        assert log_det2_convexity_gap(a, 0.2, 0.9) >= -1e-12


def test_log_jacobian_expansion(half_solution):
    expansion = log_jacobian_expansion(half_solution.phi, 1.0)
    # m'(0) = 𝓛φ(1) = 0 and m''(0) = |∇φ|² + ‖∇²φ‖² = 1/2
    assert expansion["first"] == pytest.approx(0.0, abs=1e-5)
    assert expansion["second"] == pytest.approx(0.5, abs=1e-2)
    assert expansion["margin"] >= 0.0
    assert expansion["m"][0] == pytest.approx(0.0, abs=1e-14)


def test_jacobian_report(half_solution, half_gaussian):
    report = jacobian_report(half_solution, half_gaussian, probe_grid(1), GaussianSpace(dim=1))
    assert report.ma_residuals.max() < 1e-10
    assert report.cost_half == pytest.approx(0.125, abs=1e-12)
