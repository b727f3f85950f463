"""Primitive-level checks: exact values, Jacobians vs finite differences,
and the spectral bounds the certification suite relies on."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rankmem import numerics as nx

from helpers import assert_close, fd_jacobian

finite_vecs = arrays(
    np.float64, st.integers(1, 8),
    elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False),
)


class TestRms:
    def test_zero_vector_forces_sqrt_eps(self):
        assert nx.rms(np.zeros(4), eps=1e-6) == pytest.approx(1e-3, abs=1e-15)

    def test_direct_evaluation(self):
        assert nx.rms(np.array([3.0, 4.0]), eps=1e-6) == pytest.approx(np.sqrt(12.5 + 1e-6))

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            nx.rms(np.array([2.0, 2.0]), eps=0.0)

    def test_non_finite_input_rejected(self):
        with pytest.raises(ValueError, match="non-finite input"):
            nx.rms(np.array([1.0, np.inf]))


class TestRmsNorm:
    def test_zero_maps_to_zero(self):
        np.testing.assert_array_equal(nx.rmsnorm(np.zeros(5)), np.zeros(5))

    def test_constant_vector_gives_ones(self):
        out = nx.rmsnorm(np.full(6, 3.0), eps=1e-15)
        np.testing.assert_allclose(out, 1.0, atol=1e-12)

    def test_direct_evaluation(self):
        out = nx.rmsnorm(np.array([3.0, 4.0]), eps=1e-6)
        r = np.sqrt(12.5 + 1e-6)
        np.testing.assert_allclose(out, [3.0 / r, 4.0 / r])
        np.testing.assert_allclose(out, [0.8485, 1.1314], atol=5e-5)

    @given(finite_vecs)
    @settings(max_examples=50, deadline=None)
    def test_output_norm_at_most_sqrt_dim(self, x):
        out = nx.rmsnorm(x)
        assert np.linalg.norm(out) <= np.sqrt(x.size) + 1e-9

    def test_rows_variant_matches(self):
        x = np.random.default_rng(0).standard_normal((7, 5))
        rows = nx.rmsnorm_rows(x)
        for i in range(7):
            np.testing.assert_allclose(rows[i], nx.rmsnorm(x[i]), atol=1e-15)


class TestRmsNormJacobian:
    def test_zero_input_is_scaled_identity(self):
        jac = nx.rmsnorm_jacobian(np.zeros(2), eps=1e-4)
        np.testing.assert_allclose(jac, 100.0 * np.eye(2), atol=1e-9)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.standard_normal(rng.integers(1, 7))
            jac = nx.rmsnorm_jacobian(x)
            num = fd_jacobian(lambda v: nx.rmsnorm(v), x)
            assert_close(jac, num, rel=1e-5, abs_=1e-6, msg="rmsnorm jacobian")
            np.testing.assert_allclose(jac, jac.T, atol=1e-14)

    def test_eigenvalue_along_x_is_eps_over_r_cubed(self):
        x = np.array([1.0, 0.0, 0.0])
        eps = 1e-6
        jac = nx.rmsnorm_jacobian(x, eps)
        r = nx.rms(x, eps)
        along = x @ jac @ x / (x @ x)
        assert along == pytest.approx(eps / r**3, rel=1e-12)

    @given(finite_vecs)
    @settings(max_examples=50, deadline=None)
    def test_spectral_bound(self, x):
        jac = nx.rmsnorm_jacobian(x)
        bound = 1.0 / nx.rms(x)
        assert nx.spectral_norm(jac) <= bound + 1e-9
        assert bound <= 1.0 / np.sqrt(nx.DEFAULT_EPS) + 1e-9

    def test_jvp_rows_matches_dense_jacobian(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 6))
        v = rng.standard_normal((4, 6))
        out = nx.rmsnorm_jvp_rows(x, v)
        for i in range(4):
            np.testing.assert_allclose(out[i], nx.rmsnorm_jacobian(x[i]) @ v[i], atol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(nx.softmax(np.zeros(3)), 1.0 / 3.0)

    def test_direct_evaluation(self):
        np.testing.assert_allclose(nx.softmax(np.array([1.0, 0.0])),
                                   [0.73106, 0.26894], atol=5e-6)

    def test_dominance_limit(self):
        out = nx.softmax(np.array([1e4, 0.0]))
        assert out[0] == pytest.approx(1.0, abs=1e-12)
        assert out[1] == pytest.approx(0.0, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            nx.softmax(np.array([]))

    def test_large_logits_stable(self):
        out = nx.softmax(np.array([1e300, 1e300]))
        np.testing.assert_allclose(out, 0.5)


class TestSoftmaxJacobian:
    def test_vertex_is_zero_matrix(self):
        np.testing.assert_array_equal(nx.softmax_jacobian(np.array([1.0, 0.0])), np.zeros((2, 2)))

    @pytest.mark.parametrize("k", [2, 3, 5, 8])
    def test_uniform_spectral_norm_is_one_over_k(self, k):
        alpha = np.full(k, 1.0 / k)
        jac = nx.softmax_jacobian(alpha)
        expected = np.eye(k) / k - np.ones((k, k)) / k**2
        np.testing.assert_allclose(jac, expected, atol=1e-15)
        # Closed-form eigenvalues of diag(1/k) - (1/k^2) 1 1^T: {1/k, 0}.
        assert nx.spectral_norm(jac) == pytest.approx(1.0 / k, rel=1e-8)
        assert 1.0 / k <= 0.5

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            z = rng.standard_normal(rng.integers(2, 7))
            alpha = nx.softmax(z)
            num = fd_jacobian(nx.softmax, z)
            assert_close(nx.softmax_jacobian(alpha), num, rel=1e-5, abs_=1e-6,
                         msg="softmax jacobian")

    @given(finite_vecs)
    @settings(max_examples=50, deadline=None)
    def test_spectral_bound_half(self, z):
        jac = nx.softmax_jacobian(nx.softmax(z))
        assert nx.spectral_norm(jac) <= 0.5 + 1e-9


class TestTopkSoftmax:
    def test_full_k_equals_softmax(self):
        z = np.random.default_rng(4).standard_normal(6)
        _, alpha = nx.topk_softmax(z, 6)
        np.testing.assert_array_equal(alpha, nx.softmax(z))

    def test_single_winner(self):
        active, alpha = nx.topk_softmax(np.array([5.0, 1.0, 1.0, 1.0]), 1)
        np.testing.assert_array_equal(active, [0])
        np.testing.assert_array_equal(alpha, [1.0, 0.0, 0.0, 0.0])

    def test_tie_breaks_to_lowest_index(self):
        active, alpha = nx.topk_softmax(np.array([2.0, 2.0, 0.0]), 2)
        np.testing.assert_array_equal(active, [0, 1])
        np.testing.assert_allclose(alpha, [0.5, 0.5, 0.0])

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            nx.topk_softmax(np.array([1.0, 2.0]), 3)
        with pytest.raises(ValueError):
            nx.topk_softmax(np.array([1.0, 2.0]), 0)

    @given(finite_vecs, st.integers(1, 8))
    @settings(max_examples=60, deadline=None)
    def test_valid_simplex_zero_off_active(self, z, k):
        k = min(k, z.size)
        active, alpha = nx.topk_softmax(z, k)
        nx.check_simplex(alpha, tol=1e-9)
        off = np.setdiff1d(np.arange(z.size), active)
        assert np.all(alpha[off] == 0.0)

    def test_rows_variant_matches(self):
        z = np.random.default_rng(5).standard_normal((9, 6))
        active, alpha = nx.topk_softmax_rows(z, 3)
        for i in range(9):
            a_i, al_i = nx.topk_softmax(z[i], 3)
            np.testing.assert_array_equal(active[i], a_i)
            np.testing.assert_allclose(alpha[i], al_i, atol=1e-15)


class TestDivergences:
    def test_kl_identity_is_zero(self):
        a = nx.softmax(np.random.default_rng(6).standard_normal(5))
        assert nx.kl_div(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_vertex_kl_is_log_inverse_mass(self):
        assert nx.kl_div(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(np.log(2.0))

    def test_support_violation(self):
        with pytest.raises(ValueError, match="support"):
            nx.kl_div(np.array([0.5, 0.5]), np.array([1.0, 0.0]))

    @given(finite_vecs)
    @settings(max_examples=50, deadline=None)
    def test_kl_nonnegative(self, z):
        rng = np.random.default_rng(abs(hash(z.tobytes())) % 2**32)
        a = nx.softmax(z)
        b = nx.softmax(rng.standard_normal(z.size))
        assert nx.kl_div(a, b) >= -1e-12

    def test_entropy_bounds_and_maximum(self):
        for m in (2, 4, 7):
            assert nx.entropy(np.full(m, 1.0 / m)) == pytest.approx(np.log(m))
        assert nx.entropy(np.array([1.0, 0.0])) == pytest.approx(0.0)


class TestSpectralNorm:
    def test_matches_numpy_on_random_matrices(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            m = rng.standard_normal((rng.integers(1, 9), rng.integers(1, 9)))
            assert nx.spectral_norm(m) == pytest.approx(np.linalg.norm(m, 2), rel=1e-8)

    def test_zero_matrix(self):
        assert nx.spectral_norm(np.zeros((3, 3))) == 0.0
