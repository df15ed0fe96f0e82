import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afq.linalg import (
    PrecisionScheme,
    SingularMatrixError,
    frobenius_norm_sq,
    is_strictly_diagonally_dominant,
    lu_invert,
    matmul,
    random_sdd_matrix,
    relative_fro_error,
    scheme_matmul,
)

D = PrecisionScheme.DOUBLE


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_projector_zeroes_row(self):
        p = np.array([[1.0, 0.0], [0.0, 0.0]])
        m = np.array([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(matmul(p, m), [[5.0, 6.0], [0.0, 0.0]])

    def test_hand_multiplication(self):
        # oracle: entry (i,j) = sum_k a[i,k] b[k,j], worked by hand
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_mixed_precision_rejected(self):
        with pytest.raises(ValueError, match="mixed precision"):
            matmul(np.ones((2, 2)), np.ones((2, 2), dtype=np.float32))

    def test_associativity(self):
        rng = np.random.default_rng(3)
        x, y, z = (rng.standard_normal((5, 5)) for _ in range(3))
        lhs = matmul(matmul(x, y), z)
        rhs = matmul(x, matmul(y, z))
        assert relative_fro_error(lhs, rhs) < 1e-10


class TestLuInvert:
    def test_identity(self):
        inv, diag = lu_invert(np.eye(3))
        assert np.allclose(inv, np.eye(3))
        assert diag.reconstruction_error < 1e-12

    def test_diagonal(self):
        inv, _ = lu_invert(np.diag([2.0, 4.0]))
        assert np.allclose(inv, np.diag([0.5, 0.25]))

    def test_closed_form_2x2(self):
        # oracle: inv([[a,b],[c,d]]) = [[d,-b],[-c,a]]/det, det = 3
        inv, _ = lu_invert(np.array([[2.0, 1.0], [1.0, 2.0]]))
        expected = np.array([[2 / 3, -1 / 3], [-1 / 3, 2 / 3]])
        assert np.allclose(inv, expected, atol=1e-14)

    def test_singular_raises_with_pivot(self):
        with pytest.raises(SingularMatrixError) as exc:
            lu_invert(np.array([[1.0, 2.0], [2.0, 4.0]]))
        assert exc.value.pivot >= 0.0

    def test_non_square_rejected(self):
        with pytest.raises(ValueError, match="square"):
            lu_invert(np.ones((2, 3)))

    def test_sdd_fixture_always_invertible(self):
        # Levy-Desplanques: SDD matrices are invertible
        for seed in range(50):
            m = random_sdd_matrix(np.random.default_rng(seed), 16)
            assert is_strictly_diagonally_dominant(m)
            _, diag = lu_invert(m)
            assert diag.reconstruction_error < 1e-10

    def test_float_scheme_dtype(self):
        m = random_sdd_matrix(np.random.default_rng(0), 8)
        inv, _ = lu_invert(m, PrecisionScheme.FLOAT)
        assert inv.dtype == np.float32

    def test_float_double_keeps_transform_double(self):
        m = random_sdd_matrix(np.random.default_rng(0), 8).astype(np.float32)
        inv, _ = lu_invert(m, PrecisionScheme.FLOAT_DOUBLE)
        assert inv.dtype == np.float64

    def test_condition_estimate_positive(self):
        _, diag = lu_invert(random_sdd_matrix(np.random.default_rng(1), 8))
        assert diag.condition_estimate >= 1.0
        assert diag.pivot_min_abs > 0.0


class TestNorms:
    def test_zeros(self):
        assert frobenius_norm_sq(np.zeros((3, 3))) == 0.0

    def test_identity(self):
        assert frobenius_norm_sq(np.eye(4)) == 4.0

    def test_hand_sum(self):
        assert frobenius_norm_sq(np.array([[1.0, 2.0], [3.0, 4.0]])) == 30.0

    def test_rel_error_identical(self):
        m = np.random.default_rng(0).standard_normal((4, 4))
        assert relative_fro_error(m, m) == 0.0

    def test_rel_error_zero_guard(self):
        assert relative_fro_error(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0

    def test_rel_error_norm_arithmetic(self):
        # ||diff||_F = 1, ||a||_F = sqrt(2)
        a = np.eye(2)
        b = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert np.isclose(relative_fro_error(a, b), 1 / np.sqrt(2))

    def test_rel_error_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            relative_fro_error(np.ones((2, 2)), np.ones((3, 3)))


class TestSdd:
    def test_identity_true(self):
        assert is_strictly_diagonally_dominant(np.eye(3))

    def test_strictness(self):
        assert not is_strictly_diagonally_dominant(np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_hand_row_sums(self):
        m = np.array([[3.0, -1.0, 1.0], [1.0, 4.0, 2.0], [0.0, 1.0, 2.0]])
        assert is_strictly_diagonally_dominant(m)

    @given(st.integers(0, 10_000))
    @settings(max_examples=200, deadline=None)
    def test_agrees_with_bruteforce(self, seed):
        m = np.random.default_rng(seed).standard_normal((8, 8))
        if seed % 3 == 0:
            m = random_sdd_matrix(np.random.default_rng(seed), 8)
        brute = all(
            abs(m[i, i]) > sum(abs(m[i, j]) for j in range(8) if j != i)
            for i in range(8)
        )
        assert is_strictly_diagonally_dominant(m) == brute


class TestEquivalenceIdentity:
    def test_transform_roundtrip_preserves_product(self):
        # X W == (X A^-1)(A W) for invertible A, the identity behind the
        # whole approach
        rng = np.random.default_rng(11)
        for seed in range(10):
            r = np.random.default_rng(seed)
            x = r.standard_normal((12, 16))
            w = r.standard_normal((16, 8))
            a = random_sdd_matrix(r, 16)
            inv, _ = lu_invert(a)
            direct = matmul(x, w)
            routed = matmul(matmul(x, inv), matmul(a, w))
            assert relative_fro_error(direct, routed) < 1e-10


class TestSchemeMatmul:
    def test_double_passthrough(self):
        a = np.random.default_rng(0).standard_normal((3, 3))
        assert scheme_matmul(a, a, D).dtype == np.float64

    def test_float_double_truncates_model_result(self):
        a = np.random.default_rng(0).standard_normal((3, 3)).astype(np.float32)
        t = np.random.default_rng(1).standard_normal((3, 3))
        out = scheme_matmul(a, t, PrecisionScheme.FLOAT_DOUBLE, transform_side=True)
        assert out.dtype == np.float32
        exact = a.astype(np.float64) @ t
        assert np.array_equal(out, exact.astype(np.float32))
