import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from implicit_etf.errors import DimensionError
from implicit_etf.vectorisation import (
    commutation_matrix,
    elimination_matrix,
    kron,
    rvec,
    rvec_inv,
    rvech,
    rvech_inv,
    vec,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
dims = st.integers(1, 5)


def matrices(rows, cols):
    return arrays(np.float64, (rows, cols), elements=finite)


@st.composite
def any_matrix(draw):
    return draw(matrices(draw(dims), draw(dims)))


def test_rvec_examples():
    assert rvec([[1, 2], [3, 4]]).tolist() == [1, 2, 3, 4]
    assert rvec(np.eye(3)).tolist() == [1, 0, 0, 0, 1, 0, 0, 0, 1]


def test_rvec_is_vec_of_transpose():
    A = np.random.default_rng(0).standard_normal((3, 2))
    oracle = np.concatenate([A.T[:, j] for j in range(A.T.shape[1])])
    np.testing.assert_array_equal(rvec(A), oracle)
    np.testing.assert_array_equal(rvec(A), vec(A.T))


def test_rvec_inv_examples():
    np.testing.assert_array_equal(rvec_inv([1, 2, 3, 4], 2, 2), [[1, 2], [3, 4]])
    np.testing.assert_array_equal(rvec_inv([1], 1, 1), [[1]])
    with pytest.raises(DimensionError):
        rvec_inv([1, 2, 3], 2, 2)


@given(any_matrix())
def test_rvec_round_trip(A):
    np.testing.assert_array_equal(rvec_inv(rvec(A), *A.shape), A)


def test_kron_examples():
    np.testing.assert_array_equal(kron(np.eye(2), [[5]]), np.diag([5.0, 5.0]))
    rng = np.random.default_rng(1)
    A, B, C, D = (rng.standard_normal((2, 2)) for _ in range(4))
    np.testing.assert_allclose(kron(A, B) @ kron(C, D), kron(A @ C, B @ D), atol=1e-12)


@settings(max_examples=50)
@given(st.data(), dims, dims, dims, dims)
def test_rvec_abc_identity(data, m, n, p, q):
    A = data.draw(matrices(m, n))
    B = data.draw(matrices(n, p))
    C = data.draw(matrices(p, q))
    lhs = rvec(A @ B @ C)
    rhs = kron(A, C.T) @ rvec(B)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(lhs).max()))


def test_kron_block_layout():
    A = np.arange(6.0).reshape(2, 3)
    B = np.arange(4.0).reshape(2, 2) + 1
    K = kron(A, B)
    p, q = B.shape
    for i in range(2):
        for j in range(3):
            for r in range(p):
                for s in range(q):
                    assert K[p * i + r, q * j + s] == A[i, j] * B[r, s]


def test_commutation_identity_case():
    for n in range(1, 5):
        np.testing.assert_array_equal(commutation_matrix(1, n).toarray(), np.eye(n))


@given(dims, dims, st.data())
def test_commutation_transposes(m, n, data):
    A = data.draw(matrices(m, n))
    K = commutation_matrix(m, n)
    np.testing.assert_array_equal(K @ vec(A), vec(A.T))
    # same permutation in row-major terms for an n×m input
    np.testing.assert_array_equal(K @ rvec(A.T), rvec(A))


@given(dims, dims)
def test_commutation_is_permutation(m, n):
    K = commutation_matrix(m, n).toarray()
    assert set(np.unique(K)) <= {0.0, 1.0}
    np.testing.assert_array_equal(K.sum(axis=0), 1)
    np.testing.assert_array_equal(K.sum(axis=1), 1)
    np.testing.assert_array_equal(K @ K.T, np.eye(m * n))


@settings(max_examples=30)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.data())
def test_commutation_swaps_kronecker_factors(m, n, r, q, data):
    A = data.draw(matrices(m, n))
    B = data.draw(matrices(r, q))
    lhs = commutation_matrix(r, m).toarray() @ kron(A, B) @ commutation_matrix(n, q).toarray()
    np.testing.assert_array_equal(lhs, kron(B, A))


def test_elimination_small_cases():
    np.testing.assert_array_equal(elimination_matrix(1).toarray(), [[1.0]])
    a, b, c = 2.0, 3.0, 5.0
    S = np.array([[a, b], [b, c]])
    # u_11 -> 1, u_21 -> 2, u_22 -> 3
    np.testing.assert_array_equal(elimination_matrix(2) @ vec(S), [a, b, c])
    np.testing.assert_array_equal(elimination_matrix(2) @ rvec(S), [a, b, c])


@given(st.integers(1, 6))
def test_elimination_structure(n):
    L = elimination_matrix(n).toarray()
    assert L.shape == (n * (n + 1) // 2, n * n)
    np.testing.assert_array_equal(L.sum(axis=1), 1)


@given(st.integers(1, 6), st.data())
def test_elimination_keeps_each_independent_entry_once(n, data):
    X = data.draw(matrices(n, n))
    S = X + X.T
    out = rvech(S)
    expected = sorted(S[i, j] for i in range(n) for j in range(i + 1))
    np.testing.assert_array_equal(sorted(out), expected)
    np.testing.assert_array_equal(rvech_inv(out, n), S)


def test_selection_matrix_transpose_scatter():
    L = elimination_matrix(3)
    w = np.arange(6.0)
    np.testing.assert_array_equal(L.rmatmul_vector(w), L.toarray().T @ w)
