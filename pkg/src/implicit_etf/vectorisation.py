"""Row-major vectorisation and the structured matrices used by the DDN Jacobians.

All Jacobians in this package are laid out with ``rvec`` (row-major stacking),
so ``rvec(A @ B @ C) == kron(A, C.T) @ rvec(B)``.
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError


def rvec(A):
    """Row-major vectorisation: ``rvec(A)[i * cols + j] == A[i, j]``."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {A.shape}")
    return A.reshape(-1).copy()


def vec(A):
    """Column-major vectorisation (stacked columns)."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {A.shape}")
    return A.reshape(-1, order="F").copy()


def rvec_inv(v, rows, cols):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size != rows * cols:
        raise DimensionError(f"cannot reshape vector of size {v.size} to {rows}x{cols}")
    return v.reshape(rows, cols).copy()


def kron(A, B):
    """Kronecker product, ``(A ⊗ B)[p*i + r, q*j + s] = A[i, j] * B[r, s]``."""
    return np.kron(np.atleast_2d(A), np.atleast_2d(B))


@dataclass(frozen=True, eq=False)
class SelectionMatrix:
    """A 0/1 matrix with exactly one unit entry per row, stored as column indices.

    ``(S @ v)[k] == v[index[k]]``.
    """

    index: np.ndarray
    n_cols: int

    @property
    def shape(self):
        return (self.index.size, self.n_cols)

    def __matmul__(self, other):
        other = np.asarray(other)
        if other.shape[0] != self.n_cols:
            raise DimensionError(f"shape mismatch: {self.shape} @ {other.shape}")
        return other[self.index]

    def rmatmul_vector(self, w):
        """Return ``S.T @ w`` (scatter-add into a length ``n_cols`` vector)."""
        w = np.asarray(w, dtype=float)
        if w.shape[0] != self.index.size:
            raise DimensionError(f"shape mismatch: {self.shape}.T @ {w.shape}")
        out = np.zeros((self.n_cols,) + w.shape[1:])
        np.add.at(out, self.index, w)
        return out

    def to_sparse(self):
        rows = np.arange(self.index.size)
        data = np.ones(self.index.size)
        return sp.csr_matrix((data, (rows, self.index)), shape=self.shape)

    def toarray(self):
        return self.to_sparse().toarray()


class CommutationMatrix(SelectionMatrix):
    """``K_{mn}`` with ``K_{mn} vec(A) = vec(A.T)`` for ``A`` of shape (m, n).

    In the row-major convention the same permutation reads
    ``K_{mn} rvec(B) = rvec(B.T)`` for ``B`` of shape (n, m).
    """

    def __init__(self, m, n):
        if m < 1 or n < 1:
            raise DimensionError(f"commutation matrix needs m, n >= 1, got {m}, {n}")
        # vec(A.T)[i*n + j] = A[i, j] = vec(A)[j*m + i]
        i, j = np.divmod(np.arange(m * n), n)
        super().__init__(index=j * m + i, n_cols=m * n)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "n", n)


def commutation_matrix(m, n):
    return CommutationMatrix(m, n)


class EliminationMatrix(SelectionMatrix):
    """``L_n`` mapping the vectorisation of a symmetric n×n matrix to its
    n(n+1)/2 distinct entries.

    Built from ``L_n = sum_{i>=j} u_ij vec(E_ij)^T`` where ``u_ij`` has its unit
    entry at (1-based) position ``(j-1)n + i - j(j-1)/2``. For symmetric input
    ``vec(S) == rvec(S)``, so the matrix applies to either layout.
    """

    def __init__(self, n):
        if n < 1:
            raise DimensionError(f"elimination matrix needs n >= 1, got {n}")
        size = n * (n + 1) // 2
        index = np.empty(size, dtype=int)
        for j in range(1, n + 1):
            for i in range(j, n + 1):
                row = (j - 1) * n + i - j * (j - 1) // 2
                index[row - 1] = (j - 1) * n + (i - 1)  # vec position of E_ij
        super().__init__(index=index, n_cols=n * n)
        object.__setattr__(self, "n", n)


def elimination_matrix(n):
    return EliminationMatrix(n)


def rvech(S):
    """Distinct entries of a symmetric matrix, ordered as ``elimination_matrix`` emits them."""
    S = np.asarray(S, dtype=float)
    return elimination_matrix(S.shape[0]) @ rvec(S)


def rvech_inv(v, n):
    """Symmetric matrix whose ``rvech`` is ``v``."""
    L = elimination_matrix(n)
    v = np.asarray(v, dtype=float)
    if v.size != L.shape[0]:
        raise DimensionError(f"expected {L.shape[0]} entries for n={n}, got {v.size}")
    lower = rvec_inv(L.rmatmul_vector(v), n, n).T  # index positions are column-major
    return lower + np.tril(lower, -1).T
