"""Implicit differentiation of ``H_tilde -> U*`` for the proximal nearest-ETF problem.

With ``y = rvec(U*)`` and ``x = rvec(H_tilde)`` the sensitivity is

    Dy = G^-1 A^T (A G^-1 A^T)^-1 A G^-1 B - G^-1 B

where ``A`` is the Jacobian of the ``rvech``'d orthogonality constraints,
``B`` the mixed second derivative of the objective and ``G`` the Hessian of
the Lagrangian. For this objective ``G = I_d ⊗ K`` and ``B = I_d ⊗ (-2 M)``
with C×C blocks, so ``ImplicitJacobian`` applies ``Dy`` and ``Dy^T`` in
O(d C^2) by working with ``K``'s eigendecomposition. The dense matrices are
available for small problems and for cross-checking.
"""
import warnings

import numpy as np
import scipy.linalg as sla

from .errors import DimensionError, SingularCurvatureError
from .geometry import standard_etf
from .nearest import euclidean_gradient, hessian_block
from .stiefel import check_on_manifold, riemannian_gradient, sym
from .vectorisation import commutation_matrix, elimination_matrix, kron, rvec, rvec_inv

STATIONARITY_TOL = 1e-6


def constraint_jacobian(U):
    """``A = L_C (K_CC + I) (U ⊗ I_C)^T``, shape ``C(C+1)/2 × dC``."""
    U = check_on_manifold(U)
    C = U.shape[1]
    K = commutation_matrix(C, C).toarray()
    L = elimination_matrix(C)
    return L @ ((K + np.eye(C * C)) @ kron(U, np.eye(C)).T)


def mixed_hessian(d, C, M_tilde=None):
    """``B = d/dH_tilde rvec(grad_U f) = -2 (I_d ⊗ M_tilde)``."""
    M = standard_etf(C) if M_tilde is None else M_tilde
    return kron(np.eye(d), -2.0 * M)


def sigma_matrix(U, euclidean_grad):
    """Lagrange multiplier functions in matrix form, ``sym(grad f^T U)``."""
    U = np.asarray(U, dtype=float)
    G = np.asarray(euclidean_grad, dtype=float)
    if G.shape != U.shape:
        raise DimensionError(f"gradient {G.shape} does not match point {U.shape}")
    return sym(G.T @ U)


def curvature_G(p, U, euclidean_grad=None):
    """``G = rvec(D^2_UU f) - I_d ⊗ Sigma(U)`` as a dense dC×dC matrix."""
    egrad = euclidean_gradient(p, U) if euclidean_grad is None else euclidean_grad
    block = hessian_block(p) - sigma_matrix(U, egrad)
    return kron(np.eye(p.d), block)


def _constraint_pairs(C):
    """(row, col) of the C×C constraint matrix for each ``rvech`` position."""
    index = elimination_matrix(C).index
    return index % C, index // C


def constraint_hessians(d, C):
    """``rvec`` Hessians of each ``rvech`` component of ``U^T U - I``."""
    rows, cols = _constraint_pairs(C)
    out = []
    for i, j in zip(rows, cols):
        E = np.zeros((C, C))
        E[i, j] = 1.0
        out.append(kron(np.eye(d), E + E.T))
    return out


def curvature_G_lagrange(p, U, euclidean_grad=None):
    """``G`` via explicit multipliers: solve ``lambda^T A = D_U f``, then contract.

    Independent of ``sigma_matrix``; used to cross-check ``curvature_G``.
    """
    egrad = euclidean_gradient(p, U) if euclidean_grad is None else euclidean_grad
    A = constraint_jacobian(U)
    lam, *_ = np.linalg.lstsq(A.T, rvec(egrad), rcond=None)
    hess_f = kron(np.eye(p.d), hessian_block(p))
    contraction = sum(l * H for l, H in zip(lam, constraint_hessians(p.d, p.C)))
    return hess_f - contraction


def constraint_gradients(U):
    """Gradients in R^{dC} (``rvec`` layout) of ``j_s = |u_s|^2/2`` then ``j_pq = <u_p, u_q>``."""
    d, C = U.shape
    grads = []
    for s in range(C):
        Z = np.zeros((d, C))
        Z[:, s] = U[:, s]
        grads.append(rvec(Z))
    for p_ in range(C):
        for q in range(p_ + 1, C):
            Z = np.zeros((d, C))
            Z[:, p_] = U[:, q]
            Z[:, q] = U[:, p_]
            grads.append(rvec(Z))
    return np.array(grads)


def gram_matrix(U):
    J = constraint_gradients(U)
    return J @ J.T


def multipliers_from_gram(U, euclidean_grad):
    """Lagrange multiplier functions as ratios of Gram determinants.

    Returns the C×C symmetric matrix with ``sigma_s`` on the diagonal and
    ``sigma_pq`` off the diagonal.
    """
    d, C = U.shape
    J = constraint_gradients(U)
    gram = J @ J.T
    rhs = J @ rvec(euclidean_grad)
    denom = np.linalg.det(gram)
    sigma = np.empty(len(J))
    for k in range(len(J)):
        numer = gram.copy()
        numer[:, k] = rhs
        sigma[k] = np.linalg.det(numer) / denom
    out = np.diag(sigma[:C])
    k = C
    for p_ in range(C):
        for q in range(p_ + 1, C):
            out[p_, q] = out[q, p_] = sigma[k]
            k += 1
    return out


class ImplicitJacobian:
    """Sensitivity of ``rvec(U*)`` to ``rvec(H_tilde)`` at a converged solution."""

    def __init__(self, U, M_tilde, block, stationarity=0.0):
        self.U = U
        self.M_tilde = M_tilde
        self.block = sym(block)
        self.d, self.C = U.shape
        self.stationarity = stationarity
        evals, evecs = np.linalg.eigh(self.block)
        scale = max(np.abs(evals).max(), 1.0)
        pair = evals[:, None] + evals[None, :]
        if np.abs(evals).min() <= 1e-13 * scale or np.abs(pair).min() <= 1e-13 * scale:
            raise SingularCurvatureError(
                "G = I_d ⊗ K is singular on the constraint subspace; the implicit "
                "function theorem does not apply (need rank(A) = C(C+1)/2 and G nonsingular)"
            )
        self._evals = evals
        self._evecs = evecs
        self._pair = pair

    # structured operators -------------------------------------------------
    def _solve_G(self, X):
        """``G^-1 rvec(X)`` in matrix form: ``X K^-1``."""
        Q = self._evecs
        return ((X @ Q) / self._evals) @ Q.T

    def _solve_schur(self, R):
        """Symmetric ``S`` with ``S K^-1 + K^-1 S = R``."""
        Q = self._evecs
        Rq = Q.T @ R @ Q
        inv = 1.0 / self._evals
        return Q @ (Rq / (inv[:, None] + inv[None, :])) @ Q.T

    def _core(self, V):
        """``G^-1 A^T (A G^-1 A^T)^-1 A V - V`` for ``V`` already multiplied by ``G^-1``."""
        R = self.U.T @ V + V.T @ self.U
        S = self._solve_schur(R)
        return self._solve_G(self.U @ S) - V

    def jvp(self, E):
        """``Dy rvec(E)`` as a d×C matrix."""
        E = np.asarray(E, dtype=float)
        if E.shape != (self.d, self.C):
            raise DimensionError(f"perturbation {E.shape} does not match ({self.d}, {self.C})")
        V = self._solve_G(-2.0 * E @ self.M_tilde.T)
        return self._core(V)

    def vjp(self, upstream):
        """``Dy^T rvec(upstream)`` as a d×C matrix."""
        Gbar = np.asarray(upstream, dtype=float)
        if Gbar.shape != (self.d, self.C):
            raise DimensionError(f"upstream {Gbar.shape} does not match ({self.d}, {self.C})")
        # G, B and the Schur complement are symmetric, so Dy^T = B G^-1 (A^T S^-1 A G^-1 - I)
        W = self._core(self._solve_G(Gbar))
        return -2.0 * W @ self.M_tilde

    # dense views, for small problems -------------------------------------
    @property
    def A(self):
        return constraint_jacobian(self.U)

    @property
    def B(self):
        return mixed_hessian(self.d, self.C, self.M_tilde)

    @property
    def G(self):
        return kron(np.eye(self.d), self.block)

    def dense(self):
        """Materialise ``Dy`` from the dense formula via a symmetric-indefinite solve."""
        A, B, G = self.A, self.B, self.G
        rank = np.linalg.matrix_rank(A)
        if rank != A.shape[0]:
            raise SingularCurvatureError(f"rank(A) = {rank} < C(C+1)/2 = {A.shape[0]}")
        solved = sla.solve(G, np.hstack([A.T, B]), assume_a="sym")
        Ginv_At, Ginv_B = solved[:, : A.shape[0]], solved[:, A.shape[0]:]
        schur = A @ Ginv_At
        return Ginv_At @ np.linalg.solve(schur, A @ Ginv_B) - Ginv_B


def dy_dh(p, solution, stationarity_tol=STATIONARITY_TOL):
    """Build the implicit Jacobian at ``solution`` (an ``EtfSolution`` or a point)."""
    U = getattr(solution, "U_star", solution)
    U = check_on_manifold(U)
    egrad = euclidean_gradient(p, U)
    g_norm = float(np.linalg.norm(riemannian_gradient(U, egrad)))
    if g_norm > stationarity_tol:
        warnings.warn(
            f"Riemannian gradient norm {g_norm:.2e} exceeds {stationarity_tol:.0e}; "
            "the implicit Jacobian is only approximate"
        )
    block = hessian_block(p) - sigma_matrix(U, egrad)
    return ImplicitJacobian(U, p.M_tilde, block, stationarity=g_norm)


def vjp(jac, upstream):
    return jac.vjp(upstream)


def dense_vjp(jac, upstream):
    """Reference VJP through the materialised ``Dy``."""
    Dy = jac.dense()
    return rvec_inv(Dy.T @ rvec(upstream), jac.d, jac.C)
