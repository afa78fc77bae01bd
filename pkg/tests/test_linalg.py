import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tvmerge.errors import NumericalError, StructureError
from tvmerge.linalg import as_matrix, frobenius_norm, gaussian_smooth_2d, svd


def _check_svd(a, res, tol=1e-10):
    m, n = a.shape
    r = min(m, n)
    assert res.U.shape == (m, r) and res.s.shape == (r,) and res.V.shape == (n, r)
    scale = max(1.0, np.abs(a).max())
    np.testing.assert_allclose(res.U @ np.diag(res.s) @ res.V.T, a, atol=tol * scale)
    np.testing.assert_allclose(res.U.T @ res.U, np.eye(r), atol=tol)
    np.testing.assert_allclose(res.V.T @ res.V, np.eye(r), atol=tol)
    assert np.all(np.diff(res.s) <= 1e-12 * scale)
    assert np.all(res.s >= 0)


@pytest.mark.parametrize("shape", [(1, 1), (5, 3), (3, 5), (8, 8), (40, 17), (17, 40)])
def test_svd_matches_lapack(shape):
    rng = np.random.default_rng(sum(shape))
    a = rng.standard_normal(shape)
    res = svd(a)
    _check_svd(a, res)
    np.testing.assert_allclose(res.s, np.linalg.svd(a, compute_uv=False), rtol=1e-12, atol=1e-13)


def test_svd_diagonal_and_identity():
    res = svd(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_allclose(res.s, [3.0, 2.0, 1.0])
    res = svd(np.eye(4))
    np.testing.assert_allclose(res.s, np.ones(4))


def test_svd_rank_one():
    u, v = np.array([1.0, 2.0, 2.0]) / 3.0, np.array([3.0, 4.0]) / 5.0
    res = svd(7.0 * np.outer(u, v))
    np.testing.assert_allclose(res.s, [7.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(res.U[:, 0], u, atol=1e-12)
    _check_svd(7.0 * np.outer(u, v), res)


def test_svd_zero_matrix_has_orthonormal_factors():
    res = svd(np.zeros((4, 3)))
    np.testing.assert_array_equal(res.s, np.zeros(3))
    np.testing.assert_allclose(res.U.T @ res.U, np.eye(3), atol=1e-14)


def test_svd_sign_convention():
    rng = np.random.default_rng(3)
    res = svd(rng.standard_normal((6, 4)))
    for j in range(4):
        col = res.U[:, j]
        assert col[np.argmax(np.abs(col))] > 0


def test_svd_vector_treated_as_column():
    res = svd(np.array([3.0, 4.0]))
    np.testing.assert_allclose(res.s, [5.0])


def test_svd_sweep_cap_raises():
    rng = np.random.default_rng(0)
    with pytest.raises(NumericalError):
        svd(rng.standard_normal((10, 10)), max_sweeps=1)


def test_svd_rejects_nonfinite():
    with pytest.raises(NumericalError):
        svd(np.array([[1.0, np.nan], [0.0, 1.0]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_svd_reconstruction_property(a):
    _check_svd(a, svd(a), tol=1e-9)


def test_frobenius_norm():
    assert frobenius_norm(np.array([[3.0, 0.0], [0.0, 4.0]])) == pytest.approx(5.0)
    assert frobenius_norm(np.zeros(3)) == 0.0
    assert as_matrix(np.arange(3.0)).shape == (3, 1)


# ---------------------------------------------------------------------------


def test_smooth_sigma_zero_is_identity():
    g = np.random.default_rng(1).standard_normal((5, 7))
    out = gaussian_smooth_2d(g, 0.0)
    np.testing.assert_array_equal(out, g)
    assert out is not g


def test_smooth_constant_grid_fixed():
    np.testing.assert_allclose(gaussian_smooth_2d(np.full((6, 9), 2.5), 1.3), 2.5, rtol=1e-14)


def test_smooth_impulse_matches_separable_kernel():
    g = np.zeros((21, 21))
    g[10, 10] = 1.0
    sigma = 1.0
    r = math.ceil(3 * sigma)
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    expected = np.zeros_like(g)
    expected[10 - r : 10 + r + 1, 10 - r : 10 + r + 1] = np.outer(k, k)
    np.testing.assert_allclose(gaussian_smooth_2d(g, sigma), expected, atol=1e-15)


def test_smooth_interior_mean_preserved():
    rng = np.random.default_rng(5)
    g = np.zeros((26, 26))
    g[6:20, 6:20] = rng.standard_normal((14, 14))
    out = gaussian_smooth_2d(g, 1.0)
    # mass that stays clear of the borders is conserved by a normalized kernel
    assert abs(out.mean() - g.mean()) < 1e-10


def test_smooth_rejects_bad_input():
    with pytest.raises(StructureError):
        gaussian_smooth_2d(np.zeros(4), 1.0)
    with pytest.raises(ValueError):
        gaussian_smooth_2d(np.zeros((3, 3)), -1.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(-100, 100, allow_nan=False)),
       st.floats(0.1, 3.0))
def test_smooth_stays_within_range(g, sigma):
    out = gaussian_smooth_2d(g, sigma)
    assert out.shape == g.shape
    assert out.min() >= g.min() - 1e-9 and out.max() <= g.max() + 1e-9


def test_frobenius_examples():
    assert frobenius_norm(np.array([[3.0, 4.0]])) == 5.0
    assert frobenius_norm(np.eye(3)) == pytest.approx(math.sqrt(3), abs=1e-15)


def test_svd_large_random_reconstruction():
    a = np.random.default_rng(64).standard_normal((64, 64))
    res = svd(a)
    rel = np.linalg.norm(res.U @ np.diag(res.s) @ res.V.T - a) / np.linalg.norm(a)
    assert rel < 1e-8
    assert np.abs(res.U.T @ res.U - np.eye(64)).max() < 1e-8


def test_smooth_impulse_mass_preserved():
    g = np.zeros((26, 26))
    g[12, 13] = 1.0
    assert gaussian_smooth_2d(g, 1.0).sum() == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 2.5))
def test_smooth_is_linear(seed, sigma):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 7, 11))
    lhs = gaussian_smooth_2d(a + b, sigma)
    rhs = gaussian_smooth_2d(a, sigma) + gaussian_smooth_2d(b, sigma)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
