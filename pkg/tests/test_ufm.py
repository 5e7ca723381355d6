import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_etf.geometry import haar_directions, standard_etf, unit_column_etf
from implicit_etf.stiefel import TrustRegionSolver
from implicit_etf.ufm import (
    ALPHA_FLOOR,
    EmaState,
    SolverState,
    TrainConfig,
    TrainingError,
    UfmModel,
    accuracy,
    batch_statistics,
    collapse_lower_bound,
    cross_entropy,
    ema_alpha,
    ema_update,
    evaluate,
    implicit_backward,
    implicit_forward,
    logits,
    make_ufm,
    normalize_columns,
    stratified_batches,
    train,
    train_step,
)


def collapsed_model(d, C, per_class, mode="implicit_etf", seed=0):
    U = haar_directions(d, C, np.random.default_rng(seed))
    labels = np.tile(np.arange(C), per_class)
    H = (U @ unit_column_etf(C))[:, labels]
    W = unit_column_etf(C) @ U.T
    return UfmModel(H, labels, C, mode, W, np.zeros(C)), U


def test_logits_examples():
    model, U = collapsed_model(8, 4, 2)
    Z = logits(model.features, U, np.zeros(8), tau=5.0)
    for i, y in enumerate(model.labels):
        assert Z[y, i] == pytest.approx(5.0)
        others = np.delete(Z[:, i], y)
        np.testing.assert_allclose(others, -5.0 / 3)
    H_perp = np.linalg.qr(np.column_stack([U, np.random.default_rng(1).standard_normal((8, 3))]))[0][:, 4:]
    np.testing.assert_allclose(logits(H_perp, U, np.zeros(8), 5.0), 0, atol=1e-14)
    H = np.random.default_rng(2).standard_normal((8, 5))
    np.testing.assert_allclose(logits(H, U, H.mean(axis=1), 10.0), 2 * logits(H, U, H.mean(axis=1), 5.0))


def test_cross_entropy_examples():
    assert cross_entropy(np.zeros((10, 7)), np.arange(7)) == pytest.approx(np.log(10))
    values = []
    for t in (0.0, 1.0, 10.0, 100.0, 1000.0):
        Z = np.zeros((3, 1))
        Z[1] = t
        values.append(cross_entropy(Z, np.array([1])))
    assert all(b < a for a, b in zip(values, values[1:]))
    assert values[-1] == pytest.approx(0.0, abs=1e-300)


def test_collapse_lower_bound():
    assert collapse_lower_bound(10, 0.0) == pytest.approx(np.log(10))
    assert collapse_lower_bound(10, 500.0) < 1e-100
    expected = np.log1p(9 * np.exp(-5 * (1 + 1 / 9)))
    assert collapse_lower_bound(10, 5.0) == pytest.approx(expected, rel=1e-12)
    # the bound is the loss of every collapsed configuration, whatever its rotation
    for seed in range(3):
        model, U = collapsed_model(12, 10, 3, seed=seed)
        Z = logits(model.features, U, model.features.mean(axis=1), 5.0)
        assert cross_entropy(Z, model.labels) == pytest.approx(collapse_lower_bound(10, 5.0), abs=1e-12)


def test_ema_examples():
    assert ema_alpha(1) == 1.0
    assert ema_alpha(10**5) == ALPHA_FLOOR
    H1 = np.random.default_rng(0).standard_normal((4, 3))
    H1 /= np.linalg.norm(H1)
    state = ema_update(EmaState(), H1)
    np.testing.assert_array_equal(state.H_tilde_ema, H1)
    assert state.step == 1 and state.alpha == 1.0
    again = ema_update(state, H1)
    np.testing.assert_allclose(again.H_tilde_ema, H1, atol=1e-15)


@settings(max_examples=25)
@given(st.integers(0, 2**16), st.integers(1, 30))
def test_ema_stays_unit_norm(seed, steps):
    rng = np.random.default_rng(seed)
    state = EmaState()
    for _ in range(steps):
        H = rng.standard_normal((5, 3))
        state = ema_update(state, H / np.linalg.norm(H))
        assert np.linalg.norm(state.H_tilde_ema) == pytest.approx(1.0, abs=1e-12)
        assert state.alpha == max(2 / (state.step + 1), ALPHA_FLOOR)


def test_stratified_batches_exact_split():
    labels = np.arange(9) % 3
    gen = stratified_batches(labels, 3, seed=0)
    for _ in range(6):
        batch = next(gen)
        assert sorted(labels[batch]) == [0, 1, 2]


def test_stratified_batches_cover_all_classes():
    labels = np.arange(1000) % 10
    gen = stratified_batches(labels, 256, seed=1)
    seen = np.zeros(1000, dtype=int)
    for _ in range(8):
        batch = next(gen)
        assert set(labels[batch]) == set(range(10))
        seen[batch] += 1
    assert seen.min() >= 1  # two epochs visit every sample


def test_stratified_batches_deterministic():
    labels = np.arange(50) % 5
    a = stratified_batches(labels, 8, seed=3)
    b = stratified_batches(labels, 8, seed=3)
    for _ in range(20):
        np.testing.assert_array_equal(next(a), next(b))
    with pytest.raises(ValueError):
        next(stratified_batches(labels, 0, seed=0))


def test_small_batches_use_missing_class_rule():
    labels = np.arange(20) % 5
    batch = next(stratified_batches(labels, 2, seed=0))
    assert batch.size == 2
    H = np.random.default_rng(0).standard_normal((6, 20))
    stats = batch_statistics(H[:, :3], labels[:3], 5)
    np.testing.assert_allclose(stats.class_means[:, 3], stats.global_mean)
    np.testing.assert_allclose(stats.centred[:, 4], 0)


def test_collapse_is_a_fixed_point():
    model, U = collapsed_model(16, 4, 5)
    config = TrainConfig(learning_rate=5.0)
    ema = EmaState()
    state = SolverState(U, U, TrustRegionSolver())
    new_model, _, record, new_state = train_step(model, config, ema, state)
    assert record.loss == pytest.approx(collapse_lower_bound(4, 5.0), abs=1e-9)
    assert record.inner_solve_iterations <= 2
    assert record.feature_grad_norm <= 1e-6
    np.testing.assert_allclose(new_model.features, model.features, atol=1e-6)
    np.testing.assert_allclose(new_state.U_star, U, atol=1e-8)


def test_zero_learning_rate_standard_step():
    model = make_ufm(8, 3, 12, "standard", seed=0)
    config = TrainConfig(learning_rate=0.0)
    new_model, _, record, _ = train_step(model, config, EmaState(), SolverState())
    np.testing.assert_array_equal(new_model.features, model.features)
    np.testing.assert_array_equal(new_model.classifier, model.classifier)
    np.testing.assert_array_equal(new_model.bias, model.bias)
    assert np.isfinite(record.loss)
    loss, acc, metrics = evaluate(new_model, config)
    assert np.isfinite(metrics.nc1) and 0 <= acc <= 1


def pipeline_fd(alpha, use_vjp, seed=3):
    rng = np.random.default_rng(seed)
    d, C, N = 8, 3, 12
    H = normalize_columns(rng.standard_normal((d, N)))
    y = np.arange(N) % C
    U_prox = haar_directions(d, C, rng)
    prev = batch_statistics(normalize_columns(H + 0.5 * rng.standard_normal((d, N))), y, C).normalised
    solver = TrustRegionSolver(tol=1e-10)

    def run(X):
        return implicit_forward(X, y, C, 5.0, 1e-3, U_prox, U_prox, prev, alpha, solver)

    grad = implicit_backward(run(H), H, y, 5.0, use_vjp)
    errs = []
    for _ in range(3):
        E = rng.standard_normal((d, N))
        eps = 1e-5
        fd = (run(H + eps * E).loss - run(H - eps * E).loss) / (2 * eps)
        errs.append(abs(fd - np.vdot(grad, E)) / abs(fd))
    return max(errs)


@pytest.mark.parametrize("alpha", [1.0, 0.4])
def test_pipeline_gradient_matches_finite_differences(alpha):
    assert pipeline_fd(alpha, use_vjp=True) <= 1e-4
    # the direct path alone misses the dependence of U* on the features
    assert pipeline_fd(alpha, use_vjp=False) > 1e-2


def test_derived_classifier_rows_stay_unit_norm():
    for mode in ("fixed_etf", "implicit_etf"):
        model = make_ufm(12, 4, 40, mode, seed=1)
        seen = []
        train(model, TrainConfig(iterations=15, metrics=False), callback=lambda r: seen.append(r))
        for r in seen:
            np.testing.assert_allclose(np.linalg.norm(r.classifier, axis=1), 1.0, atol=1e-12)


def test_training_is_deterministic():
    for mode in ("standard", "implicit_etf"):
        cfg = TrainConfig(iterations=10, seed=4, batch_size=16)
        a = train(make_ufm(10, 4, 40, mode, seed=4), cfg)
        b = train(make_ufm(10, 4, 40, mode, seed=4), cfg)
        for ra, rb in zip(a.trace, b.trace):
            assert ra.loss == rb.loss and ra.metrics.as_dict() == rb.metrics.as_dict()
        np.testing.assert_array_equal(a.model.features, b.model.features)


def test_failed_step_leaves_state_unchanged():
    model = make_ufm(6, 3, 9, "implicit_etf", seed=0)
    model.features[:] = model.features[:, :1]  # every feature identical: no class signal
    before = model.copy()
    with pytest.raises(TrainingError):
        train_step(model, TrainConfig(), EmaState(), SolverState())
    np.testing.assert_array_equal(model.features, before.features)


def test_warm_start_tail_is_cheap():
    model = make_ufm(32, 5, 100, "implicit_etf", seed=2)
    result = train(model, TrainConfig(iterations=60, metrics=False))
    its = np.array([r.inner_solve_iterations for r in result.trace])
    head, tail = its[1:20], its[-20:]
    assert tail.mean() <= head.mean()


def test_small_ufm_reaches_collapse():
    model = make_ufm(32, 4, 80, "implicit_etf", seed=0)
    result = train(model, TrainConfig(iterations=300, log_every=50))
    last = result.trace[-1]
    assert last.train_top1 == 1.0
    assert last.loss - collapse_lower_bound(4, 5.0) < 1e-2
    assert last.metrics.nc1 < 1e-2


def test_minibatch_training_runs_all_modes():
    for mode in ("standard", "fixed_etf", "implicit_etf"):
        result = train(make_ufm(16, 4, 40, mode, seed=5), TrainConfig(iterations=20, batch_size=8))
        assert np.isfinite(result.trace[-1].loss)
        assert accuracy(np.eye(4)[:, [0, 1]], np.array([0, 1])) == 1.0


def test_fixed_etf_uses_initial_frame():
    model = make_ufm(8, 3, 12, "fixed_etf", seed=0)
    np.testing.assert_allclose(model.classifier, unit_column_etf(3) @ np.eye(8, 3).T)
    W0 = model.classifier.copy()
    result = train(model, TrainConfig(iterations=5, metrics=False))
    np.testing.assert_array_equal(result.model.classifier, W0)
    assert standard_etf(3).shape == (3, 3)
