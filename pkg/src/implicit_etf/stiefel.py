"""Stiefel-manifold primitives and a Riemannian trust-region minimiser.

Points are plain ``(d, C)`` arrays with orthonormal columns; tangent vectors at
``U`` are ``(d, C)`` arrays ``Z`` with ``U^T Z + Z^T U = 0``. The metric is the
Frobenius inner product inherited from the embedding space.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConstraintError, DimensionError, NumericalError
from .geometry import ORTHONORMAL_TOL, orthonormality_residual


def sym(A):
    return 0.5 * (A + A.T)


def check_on_manifold(U, tol=ORTHONORMAL_TOL):
    U = np.asarray(U, dtype=float)
    if U.ndim != 2 or U.shape[0] < U.shape[1]:
        raise DimensionError(f"Stiefel points need d >= C, got shape {U.shape}")
    residual = orthonormality_residual(U)
    if not residual <= tol:
        raise ConstraintError(f"||U^T U - I||_F = {residual:.3e} exceeds {tol:.0e}")
    return U


def project_to_tangent(U, Z):
    """Orthogonal projection of ``Z`` onto the tangent space at ``U``: ``Z - U sym(U^T Z)``."""
    Z = np.asarray(Z, dtype=float)
    if Z.shape != U.shape:
        raise DimensionError(f"tangent candidate {Z.shape} does not match point {U.shape}")
    return Z - U @ sym(U.T @ Z)


def riemannian_gradient(U, euclidean_grad):
    """Embedded gradient field ``grad f - U Sigma(U)`` with ``Sigma = sym(grad f^T U)``."""
    return project_to_tangent(U, euclidean_grad)


def retract(U, Z):
    """QR retraction ``qf(U + Z)`` with the diagonal of R made positive."""
    Q, R = np.linalg.qr(U + Z)
    diag = np.diag(R)
    scale = np.abs(diag).max() if diag.size else 1.0
    if not np.all(np.isfinite(R)) or np.abs(diag).min() <= 1e-14 * max(scale, 1.0):
        raise NumericalError("retraction lost rank")
    return Q * np.sign(diag)


def procrustes_oracle(G, rcond=1e-10):
    """Closed-form maximiser of ``Tr(G^T U)`` over the Stiefel manifold.

    Returns ``(U, unique)`` where ``U = P Q^T`` from the thin SVD ``G = P S Q^T``
    and ``unique`` is False when ``G`` is numerically rank deficient.
    """
    G = np.asarray(G, dtype=float)
    if not np.any(G):
        raise ValueError("Procrustes target is the zero matrix")
    P, s, Qt = np.linalg.svd(G, full_matrices=False)
    return P @ Qt, bool(s[-1] > rcond * s[0])


@dataclass
class SolveReport:
    solution: np.ndarray
    objective_value: float
    riemannian_grad_norm: float
    iterations: int
    converged: bool
    inner_iterations: int = 0
    elapsed: float = 0.0
    history: list = field(default_factory=list)  # objective at each accepted iterate


class TrustRegionSolver:
    """Riemannian trust-region method with a truncated-CG inner solver.

    Hessian-vector products are finite differences of the Riemannian gradient
    along the retraction, transported back by tangent projection.
    """

    def __init__(
        self,
        tol=1e-8,
        max_iter=500,
        initial_radius=1.0,
        max_radius=None,
        rho_prime=0.1,
        kappa=0.1,
        theta=1.0,
        max_inner=None,
        fd_step=1e-7,
    ):
        if tol <= 0:
            raise ValueError("tol must be positive")
        self.tol = tol
        self.max_iter = max_iter
        self.initial_radius = initial_radius
        self.max_radius = max_radius
        self.rho_prime = rho_prime
        self.kappa = kappa
        self.theta = theta
        self.max_inner = max_inner
        self.fd_step = fd_step

    def _hessian_fd(self, rgrad_fn, U, g, xi):
        norm = np.linalg.norm(xi)
        if norm == 0.0:
            return np.zeros_like(xi)
        t = self.fd_step * (1.0 + np.linalg.norm(U)) / norm
        g_moved = rgrad_fn(retract(U, t * xi))
        return project_to_tangent(U, (g_moved - g) / t)

    def _truncated_cg(self, hess, U, g, radius, max_inner):
        eta = np.zeros_like(g)
        h_eta = np.zeros_like(g)
        r = g.copy()
        r0 = np.linalg.norm(r)
        z_r = np.vdot(r, r)
        delta = -r
        e_pe, e_pd, d_pd = 0.0, 0.0, z_r
        j = 0
        for j in range(1, max_inner + 1):
            h_delta = hess(delta)
            d_hd = np.vdot(delta, h_delta)
            alpha = z_r / d_hd if d_hd != 0 else np.inf
            e_pe_new = e_pe + 2.0 * alpha * e_pd + alpha**2 * d_pd
            if d_hd <= 0 or e_pe_new >= radius**2:
                tau = (-e_pd + np.sqrt(e_pd**2 + d_pd * (radius**2 - e_pe))) / d_pd
                eta = eta + tau * delta
                h_eta = h_eta + tau * h_delta
                return eta, h_eta, j, True
            e_pe = e_pe_new
            eta = eta + alpha * delta
            h_eta = h_eta + alpha * h_delta
            r = project_to_tangent(U, r + alpha * h_delta)
            r_norm = np.linalg.norm(r)
            if r_norm <= r0 * min(r0**self.theta, self.kappa):
                break
            z_r_old, z_r = z_r, np.vdot(r, r)
            beta = z_r / z_r_old
            delta = -r + beta * delta
            e_pd = beta * (e_pd + alpha * d_pd)
            d_pd = z_r + beta**2 * d_pd
        return eta, h_eta, j, False

    def minimize(self, objective_fn, euclidean_grad_fn, U_init):
        start = time.perf_counter()
        U = check_on_manifold(U_init)
        d, C = U.shape
        max_radius = np.sqrt(C) if self.max_radius is None else self.max_radius
        max_inner = 2 * d * C if self.max_inner is None else self.max_inner

        def rgrad(X):
            return riemannian_gradient(X, euclidean_grad_fn(X))

        f = float(objective_fn(U))
        if not np.isfinite(f):
            raise NumericalError("objective is not finite at the initial point")
        g = rgrad(U)
        radius = min(self.initial_radius, max_radius)
        history = [f]
        inner_total = 0
        iteration = 0
        while True:
            g_norm = np.linalg.norm(g)
            if g_norm <= self.tol or iteration >= self.max_iter:
                break
            iteration += 1
            eta, h_eta, n_inner, on_boundary = self._truncated_cg(
                lambda xi: self._hessian_fd(rgrad, U, g, xi), U, g, radius, max_inner
            )
            inner_total += n_inner
            U_new = retract(U, eta)
            f_new = float(objective_fn(U_new))
            if not np.isfinite(f_new):
                raise NumericalError("objective became non-finite")
            model_decrease = -(np.vdot(g, eta) + 0.5 * np.vdot(eta, h_eta))
            # guards rho against cancellation once f stops changing at machine precision
            rho_reg = max(1.0, abs(f)) * np.finfo(float).eps * 1e3
            if model_decrease < 0:
                rho = -np.inf
            else:
                rho = (f - f_new + rho_reg) / (model_decrease + rho_reg)
            if rho < 0.25:
                radius *= 0.25
            elif rho > 0.75 and on_boundary:
                radius = min(2.0 * radius, max_radius)
            # f_new may exceed f by rounding once the gradient is tiny
            if rho > self.rho_prime and f_new <= f + rho_reg:
                U, f = U_new, f_new
                g = rgrad(U)
                history.append(f)
            elif radius < 1e-14:
                break
        g_norm = float(np.linalg.norm(g))
        return SolveReport(
            solution=U,
            objective_value=f,
            riemannian_grad_norm=g_norm,
            iterations=iteration,
            converged=g_norm <= self.tol,
            inner_iterations=inner_total,
            elapsed=time.perf_counter() - start,
            history=history,
        )


def trust_region_minimize(objective_fn, euclidean_grad_fn, U_init, tol=1e-8, max_iter=500, **options):
    """Minimise ``objective_fn`` over the Stiefel manifold starting from ``U_init``.

    Exceeding ``max_iter`` returns an unconverged report rather than raising.
    """
    solver = TrustRegionSolver(tol=tol, max_iter=max_iter, **options)
    return solver.minimize(objective_fn, euclidean_grad_fn, U_init)
