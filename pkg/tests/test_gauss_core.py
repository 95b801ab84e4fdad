import numpy as np
import pytest

from common.errors import DimensionMismatchError, NonFiniteValueError, NotPositiveDefiniteError, UnnormalizedDensityError
from common.models import ExpectationMethod, GaussianSpace
from common.utils import make_rng
from transport.gauss_core import (
    DensitySpec,
    ScalarField,
    as_batch,
    box_mass,
    check_h_log_concave,
    check_one_convex,
    conditional_projection,
    expect,
    gaussian_log_density,
    gaussian_ratio_density,
    normalization_check,
    ou_apply,
    ou_smooth,
    probe_grid,
    quadratic_field,
    quartic_density,
    relative_entropy,
    sample_target,
    smoothed_density,
)


def test_as_batch_shapes():
    batch, single = as_batch([1.0, 2.0], 2)
    assert batch.shape == (1, 2) and single

    batch, single = as_batch([1.0, 2.0, 3.0], 1)
    assert batch.shape == (3, 1) and not single

    batch, single = as_batch(0.5, 1)
    assert batch.shape == (1, 1) and single

    with pytest.raises(DimensionMismatchError):
        as_batch(np.zeros((4, 3)), 2)


def test_gaussian_log_density(space_1d, space_2d):
    assert gaussian_log_density(0.0, space_1d) == pytest.approx(-0.9189385, abs=1e-7)
    assert gaussian_log_density([0.0, 0.0], space_2d) == pytest.approx(-1.8378771, abs=1e-7)
    assert gaussian_log_density([1.0, 0.0], space_2d) == pytest.approx(-2.3378771, abs=1e-7)
    assert gaussian_log_density(np.zeros((5, 2)), space_2d).shape == (5,)
    with pytest.raises(DimensionMismatchError):
        gaussian_log_density([0.0, 0.0, 0.0], space_2d)


def test_expect_gaussian_moments(space_1d, space_2d):
    assert expect(lambda x: x[:, 0] ** 2, space_1d).value == pytest.approx(1.0, abs=1e-12)
    assert expect(lambda x: x[:, 0] ** 4, space_1d).value == pytest.approx(3.0, abs=1e-10)
    second = expect(lambda x: x[:, 0] ** 2 * x[:, 1] ** 2, space_2d)
    assert second.value == pytest.approx(1.0, abs=1e-12)
    assert second.stderr == 0.0
    assert second.method == ExpectationMethod.QUADRATURE


def test_expect_monte_carlo_reports_stderr():
    space = GaussianSpace(dim=5, mc_samples=20000, seed=9)
    result = expect(lambda x: np.sum(x ** 2, axis=1), space)
    assert result.method == ExpectationMethod.MONTE_CARLO
    assert result.stderr > 0
    assert abs(result.value - 5.0) < 4 * result.stderr


def test_expect_monte_carlo_is_reproducible():
    space = GaussianSpace(dim=4, mc_samples=1000, seed=12)
    a = expect(lambda x: x[:, 0] * x[:, 1], space, label="corr")
    b = expect(lambda x: x[:, 0] * x[:, 1], space, label="corr")
    assert a.value == b.value


def test_expect_rejects_non_finite_integrand(space_1d):
    with pytest.raises(NonFiniteValueError):
        expect(lambda x: 1.0 / (x[:, 0] * 0.0), space_1d)


def test_expect_on_box_support(space_1d):
    result = expect(lambda x: np.ones(x.shape[0]), space_1d, support=([-1.0], [1.0]))
    assert result.value == pytest.approx(box_mass([-1.0], [1.0]), rel=1e-12)


def test_gaussian_ratio_density_values(half_gaussian):
    assert half_gaussian.normalization_c == pytest.approx(0.5)
    assert half_gaussian(0.0) == pytest.approx(2.0)
    assert half_gaussian.alpha_lower_bound == pytest.approx(0.0, abs=1e-12)
    assert half_gaussian.is_h_convex


@pytest.mark.parametrize("cov", [[[1.0]], np.eye(2), [[1.0, 0.0], [0.0, 0.5]]])
def test_centered_contraction_has_zero_lower_bound(cov):
    L = gaussian_ratio_density(None, cov)
    assert L.alpha_lower_bound == 0.0
    assert L.is_h_convex


def test_shifted_standard_gaussian_has_no_lower_bound():
    # f(x) = −m·x + ½|m|² is unbounded below
    assert gaussian_ratio_density([1.0, 0.0], np.eye(2)).alpha_lower_bound is None


def test_gaussian_ratio_density_rejects_indefinite_covariance():
    with pytest.raises(NotPositiveDefiniteError):
        gaussian_ratio_density(None, [[1.0, 2.0], [2.0, 1.0]])


def test_wide_gaussian_is_not_log_concave():
    wide = gaussian_ratio_density(None, [[4.0]])
    assert not wide.is_h_convex
    assert wide.alpha_lower_bound is None
    assert not check_h_log_concave(wide, probe_grid(1)).holds


def test_canonical_densities_are_normalized(space_1d, half_gaussian, unit_interval, quartic_1d):
    for L in (half_gaussian, unit_interval, quartic_1d):
        assert normalization_check(L, space_1d).value == pytest.approx(1.0, abs=1e-6)


def test_normalization_check_rejects_wrong_constant(space_1d, half_gaussian):
    wrong = DensitySpec(half_gaussian.exponent, 1.0, is_h_convex=True)
    with pytest.raises(UnnormalizedDensityError):
        normalization_check(wrong, space_1d)


def test_quartic_density_requires_positive_coefficient():
    with pytest.raises(ValueError):
        quartic_density(0.0)


def test_relative_entropy_closed_forms(space_1d, half_gaussian, unit_interval):
    # N(0, s²) against N(0, 1): ½(s² − 1 − log s²)
    assert relative_entropy(half_gaussian, space_1d).value == pytest.approx(0.5 * (0.25 - 1.0 - np.log(0.25)), abs=1e-6)
    # conditioned law: −log μ(A)
    assert relative_entropy(unit_interval, space_1d).value == pytest.approx(-np.log(box_mass([-1.0], [1.0])), abs=1e-6)


def test_ou_smooth_of_square(space_1d):
    square = quadratic_field([[2.0]])
    t = 0.5
    smoothed = ou_smooth(square, t, space_1d)
    decay = np.exp(-2 * t)
    for x in (0.0, 1.0, 2.0):
        assert smoothed(x) == pytest.approx(decay * x ** 2 + 1.0 - decay, abs=1e-10)
    assert smoothed.gradient(np.array([[2.0]]))[0, 0] == pytest.approx(4.0 * decay, abs=1e-10)
    assert ou_apply(square, 0.0, 1.5) == pytest.approx(2.25)


def test_ou_smooth_rejects_negative_time():
    with pytest.raises(ValueError):
        ou_smooth(quadratic_field([[1.0]]), -0.1)


def test_conditional_projection_integrates_out_tail(space_2d):
    field = quadratic_field(2.0 * np.eye(2))
    projected = conditional_projection(field, 1, space_2d)
    assert projected.dim == 1
    assert projected(1.5) == pytest.approx(1.5 ** 2 + 1.0, abs=1e-10)
    with pytest.raises(ValueError):
        conditional_projection(field, 3, space_2d)


def test_smoothed_gaussian_density_stays_gaussian(correlated_gaussian):
    t = 0.7
    L_t = smoothed_density(correlated_gaussian, t, keep=1)
    decay = np.exp(-2 * t)
    mean, cov = L_t.gaussian
    assert cov[0, 0] == pytest.approx(decay * 0.5 + 1.0 - decay)
    assert mean[0] == pytest.approx(0.0)


def test_finite_difference_derivatives_match_closed_form():
    closed = quadratic_field([[1.0, 0.3], [0.3, -0.5]], linear=[0.2, -1.0])
    numeric = ScalarField(2, closed.values, name="fd")
    x = np.array([[0.4, -1.2], [2.0, 0.5]])
    assert np.allclose(numeric.gradient(x), closed.gradient(x), atol=1e-7)
    assert np.allclose(numeric.hessian(x), closed.hessian(x), atol=1e-4)


def test_check_one_convex():
    grid = probe_grid(2)
    assert check_one_convex(quadratic_field(-0.5 * np.eye(2)), grid).holds
    report = check_one_convex(quadratic_field(np.diag([-2.0, 1.0])), grid)
    assert not report.holds
    assert report.worst_eigenvalue == pytest.approx(-2.0)


def test_probe_grid_sizes():
    assert probe_grid(1).shape == (61, 1)
    assert probe_grid(2).shape == (225, 2)
    assert probe_grid(3, radius=1.0).max() == pytest.approx(1.0)


def test_sample_target_by_rejection(quartic_1d):
    samples = sample_target(quartic_1d, 5000, seed=4)
    assert samples.shape == (5000, 1)
    # f = x⁴/4 pulls mass towards the origin
    assert samples.var() < 1.0


def test_sample_target_uses_own_sampler(unit_interval):
    samples = sample_target(unit_interval, 2000, seed=4)
    assert samples.min() >= -1.0 and samples.max() <= 1.0


def test_make_rng_labels_give_independent_streams():
    a = make_rng(5, "paths").standard_normal(3)
    b = make_rng(5, "paths").standard_normal(3)
    c = make_rng(5, "other").standard_normal(3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
