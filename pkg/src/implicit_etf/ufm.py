"""Unconstrained feature model training with standard, fixed-ETF and implicit-ETF classifiers.

Features are free unit-norm columns of ``H`` (d×N). Each step computes the
class-mean statistics, smooths ``H_tilde`` with an exponential moving average,
sets the classifier and takes a projected gradient step on the features.
In ``implicit_etf`` mode the classifier is ``W = M U*^T`` with ``U*`` the
proximal nearest-ETF solution and bias ``b = -W h_G``; the feature gradient
is the direct path plus (optionally) the path through ``U*``.
"""
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .ddn import dy_dh
from .errors import DegenerateFeaturesError, DimensionError, NumericalError
from .geometry import (
    DEGENERATE_TOL,
    FeatureStatistics,
    canonical_directions,
    class_sums,
    collect_metrics,
    haar_directions,
    unit_column_etf,
)
from .nearest import NearestEtfProblem, initialize_directions, solve_nearest_etf
from .stiefel import TrustRegionSolver

log = logging.getLogger(__name__)

MODES = ("standard", "fixed_etf", "implicit_etf")
ALPHA_FLOOR = 1e-4


class TrainingError(RuntimeError):
    """A training step failed; the model state was left unchanged."""


@dataclass
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 5.0
    tau: float = 5.0
    delta: float = 1e-3
    batch_size: Optional[int] = None  # None: full batch
    seed: int = 0
    init_scheme: str = "canonical"
    fixed_direction: str = "canonical"
    use_ddn_vjp: bool = True
    use_ema: bool = True
    solver_tol: float = 1e-8
    solver_max_iter: int = 500
    log_every: int = 1
    metrics: bool = True
    stop_at_interpolation: bool = False


# --------------------------------------------------------------------------
# model


@dataclass
class UfmModel:
    features: np.ndarray  # (d, N), unit-norm columns
    labels: np.ndarray  # (N,)
    num_classes: int
    mode: str
    classifier: np.ndarray  # (C, d)
    bias: np.ndarray  # (C,)

    @property
    def d(self):
        return self.features.shape[0]

    @property
    def N(self):
        return self.features.shape[1]

    @property
    def C(self):
        return self.num_classes

    def copy(self):
        return replace(
            self,
            features=self.features.copy(),
            labels=self.labels.copy(),
            classifier=self.classifier.copy(),
            bias=self.bias.copy(),
        )


def normalize_columns(X):
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0.0):
        raise NumericalError("cannot normalise a zero-norm feature")
    return X / norms


def normalize_rows(X):
    return normalize_columns(X.T).T


def balanced_labels(N, C):
    return np.arange(N) % C


def make_ufm(d, C, N, mode, seed=0, fixed_direction="canonical"):
    """Random UFM with balanced labels; the classifier follows ``mode``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if d < C:
        raise DimensionError(f"need d >= C, got d={d}, C={C}")
    rng = np.random.default_rng(seed)
    features = normalize_columns(rng.standard_normal((d, N)))
    labels = balanced_labels(N, C)
    if mode == "standard":
        W = normalize_rows(rng.standard_normal((C, d)))
    else:
        if fixed_direction == "canonical":
            U = canonical_directions(d, C)
        else:
            U = haar_directions(d, C, rng)
        W = unit_column_etf(C) @ U.T
    return UfmModel(features, labels, C, mode, W, np.zeros(C))


# --------------------------------------------------------------------------
# loss pieces


def logits(H, U_star, h_G, tau):
    """``tau * M U*^T (h_i - h_G)`` for every column of ``H``; returns C×N."""
    C = U_star.shape[1]
    W = unit_column_etf(C) @ U_star.T
    return tau * (W @ H - (W @ h_G)[:, None])


def cross_entropy(Z, labels):
    """Mean negative log-softmax of the true class, max-shifted."""
    Z = np.asarray(Z, dtype=float)
    idx = np.arange(Z.shape[1])
    top = Z.argmax(axis=0)
    shifted = Z - Z[top, idx]
    rest = np.exp(shifted)
    rest[top, idx] = 0.0
    # log1p keeps tiny losses accurate when one logit dominates
    log_norm = np.log1p(rest.sum(axis=0))
    return float(np.mean(log_norm - shifted[labels, idx]))


def softmax(Z):
    shifted = np.exp(Z - Z.max(axis=0))
    return shifted / shifted.sum(axis=0)


def collapse_lower_bound(C, tau):
    """Cross-entropy of the exactly collapsed configuration (features on ETF vertices)."""
    M = unit_column_etf(C)
    Z = tau * M.T @ M  # column c is the logit vector of a feature at vertex c
    return cross_entropy(Z, np.arange(C))


def accuracy(Z, labels):
    return float(np.mean(np.argmax(Z, axis=0) == labels))


# --------------------------------------------------------------------------
# statistics, EMA and batching


def batch_statistics(H, labels, C):
    """Class statistics where classes absent from the batch take the batch global mean."""
    counts = np.bincount(labels, minlength=C)
    global_mean = H.mean(axis=1)
    sums = class_sums(H, labels, C)
    present = counts > 0
    class_means = np.tile(global_mean[:, None], (1, C))
    class_means[:, present] = sums[:, present] / counts[present]
    centred = class_means - global_mean[:, None]
    norm = np.linalg.norm(centred)
    if norm <= DEGENERATE_TOL * (1.0 + np.linalg.norm(class_means)):
        raise DegenerateFeaturesError("centred class means are all zero")
    return FeatureStatistics(global_mean, class_means, centred, centred / norm, counts)


def ema_alpha(step, floor=ALPHA_FLOOR):
    return max(2.0 / (step + 1.0), floor)


@dataclass
class EmaState:
    H_tilde_ema: Optional[np.ndarray] = None
    step: int = 0
    alpha: float = 1.0
    alpha_floor: float = ALPHA_FLOOR


def ema_update(state, H_tilde_batch):
    """Blend in a new normalised mean matrix with ``alpha = max(2/(T+1), floor)``, then renormalise."""
    step = state.step + 1
    alpha = ema_alpha(step, state.alpha_floor)
    if state.H_tilde_ema is None:
        blended = H_tilde_batch
    else:
        blended = alpha * H_tilde_batch + (1.0 - alpha) * state.H_tilde_ema
    return EmaState(blended / np.linalg.norm(blended), step, alpha, state.alpha_floor)


def stratified_batches(labels, batch_size, seed):
    """Endless seeded stream of index arrays, reshuffled every epoch.

    With ``batch_size >= C`` each class is split across the batches so every
    batch holds at least one sample per class; otherwise batches are random.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    C = int(labels.max()) + 1
    N = labels.size
    per_class = [np.flatnonzero(labels == c) for c in range(C)]
    stratify = batch_size >= C and min(len(p) for p in per_class) > 0
    n_batches = max(1, -(-N // batch_size))
    if stratify:
        n_batches = min(n_batches, min(len(p) for p in per_class))
    while True:
        if stratify:
            batches = [[] for _ in range(n_batches)]
            for c, idx in enumerate(per_class):
                chunks = np.array_split(rng.permutation(idx), n_batches)
                offset = rng.integers(n_batches)
                for k, chunk in enumerate(chunks):
                    batches[(k + offset) % n_batches].append(chunk)
            order = rng.permutation(n_batches)
            for k in order:
                yield np.sort(np.concatenate(batches[k]))
        else:
            perm = rng.permutation(N)
            for start in range(0, N, batch_size):
                yield np.sort(perm[start:start + batch_size])


# --------------------------------------------------------------------------
# implicit-ETF forward/backward


@dataclass
class ImplicitForward:
    loss: float
    logits: np.ndarray
    U_star: np.ndarray
    H_tilde: np.ndarray
    stats: FeatureStatistics
    solve_iterations: int
    solve_time: float
    converged: bool


def _normalisation_vjp(x_hat, norm, g):
    """Gradient through ``x -> x / ||x||`` given the output and ``||x||``."""
    return (g - x_hat * np.vdot(x_hat, g)) / norm


def _sample_basis(labels, C):
    """Stacked ``[onehot; 1]`` of shape (C+1, n): sample-wise expansion of per-class terms."""
    basis = np.zeros((C + 1, labels.size))
    basis[labels, np.arange(labels.size)] = 1.0
    basis[C] = 1.0
    return basis


def _means_vjp_coefficients(g_centred, counts, n):
    """Pull a gradient on ``H_bar`` back through the class and global means.

    Returns the d×(C+1) matrix ``X`` with per-sample gradient ``X @ _sample_basis``.
    """
    present = counts > 0
    # absent classes have H_bar column fixed at zero
    g = np.where(present[None, :], g_centred, 0.0)
    safe = np.where(present, counts, 1)
    return np.hstack([g / safe, -g.sum(axis=1, keepdims=True) / n])


def implicit_forward(H, labels, C, tau, delta, U_init, U_prox, ema_prev=None, alpha=1.0, solver=None):
    stats = batch_statistics(H, labels, C)
    if ema_prev is None or alpha >= 1.0:
        Z = stats.normalised
    else:
        Z = alpha * stats.normalised + (1.0 - alpha) * ema_prev
    z_norm = np.linalg.norm(Z)
    H_tilde = Z / z_norm
    problem = NearestEtfProblem(H_tilde, delta, U_prox)
    sol = solve_nearest_etf(problem, U_init, solver)
    Zl = logits(H, sol.U_star, stats.global_mean, tau)
    fwd = ImplicitForward(
        loss=cross_entropy(Zl, labels),
        logits=Zl,
        U_star=sol.U_star,
        H_tilde=H_tilde,
        stats=stats,
        solve_iterations=sol.report.iterations,
        solve_time=sol.report.elapsed,
        converged=sol.report.converged,
    )
    fwd._problem = problem
    fwd._z_norm = z_norm
    fwd._alpha = alpha if ema_prev is not None else 1.0
    return fwd


def implicit_backward(fwd, H, labels, tau, use_ddn_vjp=True):
    """Gradient of the mean cross-entropy with respect to the batch features."""
    n = H.shape[1]
    C = fwd.U_star.shape[1]
    M = unit_column_etf(C)
    W = M @ fwd.U_star.T
    basis = _sample_basis(labels, C)
    delta_logits = (softmax(fwd.logits) - basis[:C]) / n  # dL/dlogits
    # direct path through logits = tau W (h_i - h_G); the h_G term centres the coefficients
    coef = tau * (delta_logits - delta_logits.mean(axis=1, keepdims=True))
    if not use_ddn_vjp:
        return W.T @ coef
    # dL/dU* = tau (H - h_G 1^T) delta^T M, without forming the centred features
    h_G = fwd.stats.global_mean
    g_U = tau * (H @ delta_logits.T - np.outer(h_G, delta_logits.sum(axis=1))) @ M
    jac = dy_dh(fwd._problem, fwd.U_star)
    g_Ht = jac.vjp(g_U)
    g_Z = _normalisation_vjp(fwd.H_tilde, fwd._z_norm, g_Ht)
    g_Hn = fwd._alpha * g_Z
    stats = fwd.stats
    g_Hbar = _normalisation_vjp(stats.normalised, stats.centred_norm, g_Hn)
    X = _means_vjp_coefficients(g_Hbar, stats.counts, n)
    # one product for both paths
    return np.hstack([W.T, X]) @ np.vstack([coef, basis])


# --------------------------------------------------------------------------
# trainer


@dataclass
class StepRecord:
    iteration: int
    loss: float
    train_top1: float
    inner_solve_iterations: int = 0
    inner_solve_time: float = 0.0
    feature_grad_norm: float = 0.0  # sphere-tangent part of the feature gradient
    metrics: Optional[object] = None
    classifier: Optional[np.ndarray] = field(default=None, repr=False)
    bias: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class SolverState:
    U_star: Optional[np.ndarray] = None
    U_prox: Optional[np.ndarray] = None
    solver: TrustRegionSolver = field(default_factory=TrustRegionSolver)


def _classifier_for(model, U_star, h_G):
    W = unit_column_etf(model.C) @ U_star.T
    return W, -W @ h_G


def full_logits(model, tau):
    """Logits of every sample under the model's current classifier."""
    H = model.features
    if model.mode == "standard":
        return tau * model.classifier @ H + model.bias[:, None]
    return tau * (model.classifier @ H + model.bias[:, None])


def train_step(model, config, ema, solver_state, batch=None):
    """One projected gradient step.

    Returns ``(model, ema, record, solver_state)``; inputs are not mutated.
    """
    H_all = model.features
    idx = np.arange(model.N) if batch is None else np.asarray(batch)
    H = H_all[:, idx]
    y = model.labels[idx]
    C, n = model.C, idx.size
    lr, tau = config.learning_rate, config.tau
    inner_its, inner_time = 0, 0.0
    new_ema = ema
    new_solver_state = solver_state
    W, b = model.classifier, model.bias
    W_used, b_used = W, b
    try:
        if model.mode == "implicit_etf":
            stats = batch_statistics(H, y, C)
            if config.use_ema:
                new_ema = ema_update(ema, stats.normalised)
                alpha = new_ema.alpha
            else:
                new_ema = EmaState(stats.normalised, ema.step + 1, 1.0, ema.alpha_floor)
                alpha = 1.0
            U_init, U_prox = solver_state.U_star, solver_state.U_prox
            if U_init is None:
                rng = np.random.default_rng(config.seed)
                U_init, U_prox = initialize_directions(
                    new_ema.H_tilde_ema, config.init_scheme, rng, solver_state.solver
                )
            fwd = implicit_forward(
                H, y, C, tau, config.delta, U_init, U_prox,
                ema_prev=ema.H_tilde_ema if config.use_ema else None,
                alpha=alpha, solver=solver_state.solver,
            )
            if not fwd.converged:
                log.warning("inner solve did not converge at step %d", new_ema.step)
            grad = implicit_backward(fwd, H, y, tau, config.use_ddn_vjp)
            loss, Z = fwd.loss, fwd.logits
            inner_its, inner_time = fwd.solve_iterations, fwd.solve_time
            W, b = _classifier_for(model, fwd.U_star, fwd.stats.global_mean)
            W_used, b_used = W, b
            new_solver_state = SolverState(fwd.U_star, fwd.U_star, solver_state.solver)
        else:
            h_G = H.mean(axis=1)
            if model.mode == "fixed_etf":
                Z = tau * (W @ H - (W @ h_G)[:, None])
            else:
                Z = tau * W @ H + b[:, None]
            loss = cross_entropy(Z, y)
            delta_logits = softmax(Z)
            delta_logits[y, np.arange(n)] -= 1.0
            delta_logits /= n
            if model.mode == "fixed_etf":
                # the centring by h_G subtracts the coefficient mean
                grad = W.T @ (tau * (delta_logits - delta_logits.mean(axis=1, keepdims=True)))
                b = -W @ h_G
                b_used = b
            else:
                grad = W.T @ (tau * delta_logits)
                if lr != 0.0:
                    W = normalize_rows(W - lr * tau * delta_logits @ H.T)
                    b = b - lr * delta_logits.sum(axis=1)
            new_ema = replace(ema, step=ema.step + 1)
    except (NumericalError, DegenerateFeaturesError, np.linalg.LinAlgError) as exc:
        raise TrainingError(f"step {ema.step + 1} aborted: {exc}") from exc

    radial = np.einsum("ij,ij->j", H, grad)
    tangent_sq = max(float(np.sum(grad * grad) - radial @ radial), 0.0)
    features = H_all
    if lr != 0.0:  # a zero step would still perturb the columns by renormalisation
        features = H_all.copy()
        features[:, idx] = normalize_columns(H - lr * grad)
    new_model = replace(model, features=features, classifier=W, bias=b)
    record = StepRecord(
        iteration=new_ema.step,
        loss=loss,
        train_top1=accuracy(Z, y),
        inner_solve_iterations=inner_its,
        inner_solve_time=inner_time,
        feature_grad_norm=np.sqrt(tangent_sq),
        classifier=W_used,
        bias=b_used,
    )
    return new_model, new_ema, record, new_solver_state


def evaluate(model, config, keep_margins=False):
    """Loss, accuracy and NC metrics over all samples for the current classifier."""
    Z = full_logits(model, config.tau)
    W, b = model.classifier, model.bias
    if model.mode == "standard":
        b = b / config.tau
    metrics = collect_metrics(W, b, model.features, model.labels, model.C, keep_margins)
    return cross_entropy(Z, model.labels), accuracy(Z, model.labels), metrics


@dataclass
class TrainResult:
    trace: list
    model: UfmModel


def train(model, config, callback=None):
    """Run ``config.iterations`` steps; returns the logged ``StepRecord``s and the final model.

    Losses, accuracies and metrics are evaluated over the full training set
    against the classifier used in that step, before the feature update.
    """
    if model.mode not in MODES:
        raise ValueError(f"unknown mode {model.mode!r}")
    ema = EmaState()
    solver_state = SolverState(
        solver=TrustRegionSolver(tol=config.solver_tol, max_iter=config.solver_max_iter)
    )
    batches = None
    if config.batch_size is not None and config.batch_size < model.N:
        batches = stratified_batches(model.labels, config.batch_size, config.seed)
    trace = []
    for it in range(1, config.iterations + 1):
        batch = next(batches) if batches is not None else None
        before = model
        model, ema, record, solver_state = train_step(model, config, ema, solver_state, batch)
        if batch is not None or config.metrics or config.stop_at_interpolation:
            # re-evaluate on the full set with the classifier of this step
            evaluated = replace(before, classifier=record.classifier, bias=record.bias)
            if config.metrics and (it % config.log_every == 0 or it == config.iterations):
                record.loss, record.train_top1, record.metrics = evaluate(evaluated, config)
            elif batch is not None or config.stop_at_interpolation:
                Z = full_logits(evaluated, config.tau)
                record.loss = cross_entropy(Z, model.labels)
                record.train_top1 = accuracy(Z, model.labels)
        if it % config.log_every == 0 or it == config.iterations:
            trace.append(record)
            if callback is not None:
                callback(record)
        if config.stop_at_interpolation and record.train_top1 >= 1.0:
            if trace[-1] is not record:
                trace.append(record)
            break
    return TrainResult(trace, model)
