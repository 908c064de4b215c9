import numpy as np
import pytest
import scipy.sparse as sp

from kgact.tensorops import (BitMask, ShapeMismatchError, csr_nbytes, densify,
                             make_csr, mm, relu, spmm, spmm_t, validate_csr)


def mm_ordered(a, b):
    """Dense product accumulating strictly in ascending inner-index order."""
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        out += a[:, k:k + 1] * b[k:k + 1, :]
    return out


class TestMM:
    def test_identity(self):
        m = np.array([[1.5, -2.0], [0.25, 7.0]])
        assert np.array_equal(mm(np.eye(2), m), m)

    def test_hand_expansion(self):
        out = mm(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
        assert np.array_equal(out, [[3.0], [7.0]])

    def test_ones_dot(self):
        k = 17
        out = mm(np.ones((1, k)), np.ones((k, 1)))
        assert out.shape == (1, 1) and out[0, 0] == k

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 2\)"):
            mm(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_associativity_on_chains(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b, c = (rng.normal(size=(8, 8)) for _ in range(3))
            left = mm(mm(a, b), c)
            right = mm(a, mm(b, c))
            assert np.allclose(left, right, rtol=1e-12, atol=1e-12)
            assert np.allclose(left, mm_ordered(mm_ordered(a, b), c), rtol=1e-12)


class TestSpmm:
    def test_identity_csr(self):
        m = np.arange(6, dtype=np.float64).reshape(3, 2)
        assert np.array_equal(spmm(make_csr(np.eye(3)), m), m)

    def test_hand_case(self):
        s = make_csr(np.array([[0.0, 0.5], [0.5, 0.0]]))
        d = np.array([[2.0, 0.0], [0.0, 4.0]])
        assert np.array_equal(spmm(s, d), [[0.0, 2.0], [1.0, 0.0]])

    def test_empty_row_gives_zeros(self):
        s = make_csr(np.array([[0.0, 1.0], [0.0, 0.0]]))
        out = spmm(s, np.array([[3.0, 1.0], [2.0, 5.0]]))
        assert np.array_equal(out[1], [0.0, 0.0])

    def test_shape_error(self):
        with pytest.raises(ShapeMismatchError):
            spmm(make_csr(np.eye(3)), np.zeros((2, 2)))

    def test_bitwise_matches_densify_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(60):
            m, k, n = rng.integers(1, 33, size=3)
            dense = np.where(rng.random((m, k)) < 0.4, rng.normal(size=(m, k)), 0.0)
            s = make_csr(dense)
            d = rng.normal(size=(k, n))
            assert np.array_equal(spmm(s, d), mm_ordered(densify(s), d))


class TestSpmmT:
    def test_symmetric_matches_spmm(self):
        dense = np.array([[0.0, 2.0, 1.0], [2.0, 0.0, 0.0], [1.0, 0.0, 3.0]])
        s = make_csr(dense)
        d = np.random.default_rng(0).normal(size=(3, 4))
        assert np.array_equal(spmm_t(s, d), spmm(s, d))

    def test_hand_transpose_case(self):
        s = make_csr(np.array([[0.0, 1.0], [0.0, 0.0]]))
        d = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(spmm_t(s, d), [[0.0, 0.0], [1.0, 2.0]])

    def test_identity(self):
        d = np.random.default_rng(1).normal(size=(4, 3))
        assert np.array_equal(spmm_t(make_csr(np.eye(4)), d), d)

    def test_bitwise_matches_transpose_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(60):
            m, k, n = rng.integers(1, 33, size=3)
            dense = np.where(rng.random((m, k)) < 0.4, rng.normal(size=(m, k)), 0.0)
            s = make_csr(dense)
            d = rng.normal(size=(m, n))
            assert np.array_equal(spmm_t(s, d), mm_ordered(densify(s).T, d))

    def test_shape_error(self):
        with pytest.raises(ShapeMismatchError):
            spmm_t(make_csr(np.eye(3)), np.zeros((2, 2)))


class TestRelu:
    def test_all_negative(self):
        out, mask = relu(np.full((2, 3), -1.0))
        assert np.array_equal(out, np.zeros((2, 3)))
        assert mask.count() == 0

    def test_elementwise_definition_and_zero_bit(self):
        out, mask = relu(np.array([[-1.0, 0.0, 2.5]]))
        assert np.array_equal(out, [[0.0, 0.0, 2.5]])
        assert np.array_equal(mask.to_bool(), [[False, False, True]])

    def test_nonnegative_unchanged(self):
        x = np.array([[0.0, 1.0], [2.0, 0.5]])
        out, mask = relu(x)
        assert np.array_equal(out, x)
        assert np.array_equal(mask.to_bool(), x > 0)

    def test_idempotent(self):
        x = np.random.default_rng(5).normal(size=(6, 7))
        once, _ = relu(x)
        twice, _ = relu(once)
        assert np.array_equal(once, twice)

    def test_mask_bytes(self):
        _, mask = relu(np.ones((3, 5)))
        assert mask.nbytes == (15 + 7) // 8
        assert isinstance(mask, BitMask)


class TestCsrHelpers:
    def test_validate_accepts_canonical(self):
        validate_csr(make_csr(np.array([[1.0, 0.0], [0.5, 2.0]])))

    def test_validate_rejects_unsorted(self):
        s = sp.csr_matrix((np.array([1.0, 2.0]), np.array([1, 0]),
                           np.array([0, 2, 2])), shape=(2, 2))
        with pytest.raises(ValueError, match="unsorted"):
            validate_csr(s)

    def test_nbytes(self):
        s = make_csr(np.eye(4, dtype=np.float32))
        assert csr_nbytes(s) == s.indptr.nbytes + s.indices.nbytes + s.data.nbytes
