"""The nearest-simplex-ETF problem and its proximal variant.

    minimise_U  ||H_tilde - U M_tilde||_F^2 + (delta/2) ||U - U_prox||_F^2
    subject to  U^T U = I_C

On the manifold both Frobenius terms that only involve ``U`` are constant, so
the objective equals ``2 + delta*C - <Y, U>`` with
``Y = 2 H_tilde M_tilde + delta U_prox``; ``procrustes_target`` returns ``Y/2``.
"""
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .geometry import canonical_directions, haar_directions, standard_etf
from .stiefel import SolveReport, TrustRegionSolver, check_on_manifold

DEFAULT_DELTA = 1e-3
RANK_RCOND = 1e-10


@dataclass(frozen=True, eq=False)
class NearestEtfProblem:
    H_tilde: np.ndarray
    delta: float = DEFAULT_DELTA
    U_prox: np.ndarray = None

    def __post_init__(self):
        H = np.asarray(self.H_tilde, dtype=float)
        if H.ndim != 2 or H.shape[0] < H.shape[1] or H.shape[1] < 2:
            raise DimensionError(f"H_tilde must be d x C with d >= C >= 2, got {H.shape}")
        if self.delta < 0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")
        object.__setattr__(self, "H_tilde", H)
        if self.U_prox is None:
            if self.delta > 0:
                raise ValueError("a proximal problem needs U_prox")
        else:
            U_prox = check_on_manifold(self.U_prox)
            if U_prox.shape != H.shape:
                raise DimensionError(f"U_prox {U_prox.shape} does not match H_tilde {H.shape}")
            object.__setattr__(self, "U_prox", U_prox)

    @property
    def d(self):
        return self.H_tilde.shape[0]

    @property
    def C(self):
        return self.H_tilde.shape[1]

    @property
    def M_tilde(self):
        return standard_etf(self.C)

    def procrustes_target(self):
        """``H_tilde M_tilde + (delta/2) U_prox``; the minimiser maximises ``<target, U>``."""
        target = self.H_tilde @ self.M_tilde
        if self.delta > 0:
            target = target + 0.5 * self.delta * self.U_prox
        return target

    def with_data(self, H_tilde=None, U_prox=None, delta=None):
        return NearestEtfProblem(
            H_tilde=self.H_tilde if H_tilde is None else H_tilde,
            delta=self.delta if delta is None else delta,
            U_prox=self.U_prox if U_prox is None else U_prox,
        )


def objective(p, U):
    value = np.sum((p.H_tilde - U @ p.M_tilde) ** 2)
    if p.delta > 0:
        value += 0.5 * p.delta * np.sum((U - p.U_prox) ** 2)
    return float(value)


def euclidean_gradient(p, U):
    M = p.M_tilde
    grad = 2.0 * (U @ M - p.H_tilde) @ M.T
    if p.delta > 0:
        grad += p.delta * (U - p.U_prox)
    return grad


def hessian_block(p):
    """C×C block ``K_f`` with ``rvec`` Hessian ``I_d ⊗ K_f = 2 (I_d ⊗ M^2) + delta I``."""
    M = p.M_tilde
    return 2.0 * M @ M.T + p.delta * np.eye(p.C)


@dataclass
class EtfSolution:
    U_star: np.ndarray
    report: SolveReport
    unique: bool


def _default_solver():
    return TrustRegionSolver()


def solve_nearest_etf(p, U_init, solver=None):
    """Trust-region solve warm-started at ``U_init``.

    When ``d == C`` the feasible set is the orthogonal group, whose two
    components cannot be connected by retraction steps; the start with its last
    column reflected is solved as well and the better result kept.
    """
    solver = solver or _default_solver()
    U_init = check_on_manifold(U_init)
    if U_init.shape != p.H_tilde.shape:
        raise DimensionError(f"U_init {U_init.shape} does not match H_tilde {p.H_tilde.shape}")

    def f(U):
        return objective(p, U)

    def grad(U):
        return euclidean_gradient(p, U)

    report = solver.minimize(f, grad, U_init)
    if p.d == p.C:
        flipped = U_init.copy()
        flipped[:, -1] *= -1.0
        other = solver.minimize(f, grad, flipped)
        if other.objective_value < report.objective_value:
            other.iterations += report.iterations
            report = other
        else:
            report.iterations += other.iterations
    s = np.linalg.svd(p.procrustes_target(), compute_uv=False)
    unique = bool(s[-1] > RANK_RCOND * s[0])
    if not unique and p.delta == 0:
        warnings.warn("nearest-ETF target is rank deficient; the minimiser is not unique")
    return EtfSolution(U_star=report.solution, report=report, unique=unique)


def initialize_directions(H_tilde, scheme="canonical", rng=None, solver=None):
    """Seed directions, then solve the non-proximal problem from the seed.

    Returns ``(U_init, U_prox)``, both equal to the non-proximal minimiser.
    """
    H_tilde = np.asarray(H_tilde, dtype=float)
    d, C = H_tilde.shape
    if scheme == "canonical":
        seed = canonical_directions(d, C)
    elif scheme == "haar_random":
        seed = haar_directions(d, C, rng if rng is not None else np.random.default_rng())
    else:
        raise ValueError(f"unknown initialisation scheme {scheme!r}")
    with warnings.catch_warnings():
        # the delta=0 problem is rank deficient by construction
        warnings.simplefilter("ignore")
        sol = solve_nearest_etf(NearestEtfProblem(H_tilde, delta=0.0), seed, solver)
    return sol.U_star.copy(), sol.U_star.copy()
