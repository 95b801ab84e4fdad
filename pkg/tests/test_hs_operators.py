import numpy as np
import pytest

from common.errors import InternalConsistencyError, NotPositiveDefiniteError, OperatorNotInvertibleError
from common.models import GaussianSpace
from transport.gauss_core import expect
from transport.hs_operators import (
    det2,
    det2_lu,
    divergence_shift,
    gaussian_target_operator,
    lambda_K,
    linear_backward_potential,
    linear_forward_potential,
    log_det2_symmetric,
    polar_decompose,
    polar_parts_from_svd,
    pushforward_density,
    random_operator,
    second_divergence,
)

SINGULAR = [[-1.0, 0.0], [0.0, 0.5]]


def test_det2_diagonal():
    # (1.5 e^{-0.5})(0.5 e^{0.5})
    assert det2(np.diag([0.5, -0.5])) == pytest.approx(0.75, rel=1e-12)


def test_det2_agrees_with_lu(rng):
    for _ in range(50):
        k = random_operator(4, rng)
        assert det2(k) == pytest.approx(det2_lu(k), rel=1e-10)


def test_log_det2_symmetric_matches_det2(rng):
    a = rng.standard_normal((3, 3))
    h = 0.1 * (a + a.T)
    assert log_det2_symmetric(h) == pytest.approx(np.log(det2(h)), abs=1e-12)


def test_divergences():
    k = [[1.0, 2.0], [0.0, 1.0]]
    assert np.allclose(divergence_shift(k, [1.0, 1.0]), [3.0, 1.0])
    # x·Kx − trace K
    assert second_divergence(k, [1.0, 1.0]) == pytest.approx(2.0)


def test_lambda_K_scalar_contraction():
    k = [[-0.5]]
    assert lambda_K(k, 0.0) == pytest.approx(0.5, rel=1e-12)
    # det(I + K)·γ((I + K)x)/γ(x) = 0.5 exp(3x²/8)
    assert lambda_K(k, 1.0) == pytest.approx(0.5 * np.exp(0.375), rel=1e-12)


def test_pushforward_density_of_scaling():
    # (I + K)μ = N(0, 1/4), density 2 exp(−3y²/2) against μ
    y = np.array([0.0, 0.5, 1.0])
    assert np.allclose(pushforward_density([[-0.5]], y), 2.0 * np.exp(-1.5 * y ** 2), rtol=1e-12)


def test_change_of_variables_for_expanding_operator():
    k = np.array([[0.5, 0.2], [0.0, 0.3]])
    space = GaussianSpace(dim=2, quadrature_order=40)
    u = np.eye(2) + k
    lhs = expect(lambda x: np.cos((x @ u.T)[:, 0]) * lambda_K(k, x), space)
    assert lhs.value == pytest.approx(np.exp(-0.5), abs=1e-8)


def test_polar_decompose_residuals(rng):
    for _ in range(100):
        k = random_operator(3, rng)
        parts = polar_decompose(k)
        residuals = parts.residuals(k)
        assert residuals["symmetry"] < 1e-10
        assert residuals["isometry"] < 1e-10
        assert residuals["recomposition"] < 1e-10
        assert residuals["min_eigenvalue"] > -1.0


def test_polar_decompose_rejects_inconsistent_factors(rng, monkeypatch):
    k = random_operator(3, rng)
    svd = np.linalg.svd

    def perturbed_svd(a, *args, **kwargs):
        result = svd(a, *args, **kwargs)
        if kwargs.get("compute_uv", True) is False:
            return result
        u, s, vt = result
        return u, s * 1.01, vt

    monkeypatch.setattr(np.linalg, "svd", perturbed_svd)
    with pytest.raises(InternalConsistencyError, match="recomposition"):
        polar_decompose(k)


def test_polar_decompose_agrees_with_scipy(rng):
    k = random_operator(3, rng)
    parts = polar_decompose(k)
    positive, isometry = polar_parts_from_svd(k)
    assert np.allclose(np.eye(3) + parts.kbar, positive, atol=1e-10)
    assert np.allclose(np.eye(3) + parts.a, isometry, atol=1e-10)


def test_singular_operator_is_rejected():
    with pytest.raises(OperatorNotInvertibleError) as excinfo:
        polar_decompose(SINGULAR)
    assert "operator not invertible" in str(excinfo.value)
    assert excinfo.value.smallest_singular_value == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(OperatorNotInvertibleError):
        lambda_K(SINGULAR, [0.0, 0.0])


def test_linear_potentials_invert_each_other(rng):
    k = random_operator(2, rng, scale=0.3, min_singular=0.5)
    phi = linear_forward_potential(k)
    psi = linear_backward_potential(k)
    x = rng.standard_normal((20, 2))
    y = x + phi.gradient(x)
    assert np.allclose(y + psi.gradient(y), x, atol=1e-10)


def test_gaussian_target_operator():
    op = gaussian_target_operator(np.diag([4.0, 9.0]))
    assert np.allclose(op.matrix, np.diag([1.0, 2.0]))
    with pytest.raises(NotPositiveDefiniteError):
        gaussian_target_operator([[1.0, 0.0], [0.0, -1.0]])


def test_random_operator_respects_singular_floor(rng):
    k = random_operator(3, rng, scale=1.0, min_singular=0.4)
    assert np.linalg.svd(np.eye(3) + k, compute_uv=False).min() > 0.4
