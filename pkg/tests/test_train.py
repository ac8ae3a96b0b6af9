import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import stratbc.policy as pol
from stratbc.linalg import ShapeError, nuclear_norm
from stratbc.policy import CONTINUOUS, DISCRETE, forward, init_policy, softmax_rows
from stratbc.stratify import LevelData, LeveledDataset
from stratbc.train import (
    AdamState,
    TrainConfig,
    TrainingStepError,
    adam_step,
    aer_loss_continuous,
    aer_loss_discrete,
    bc_loss_continuous,
    bc_loss_discrete,
    fit,
    read_training_log,
    softmax_grad_from_probs,
    total_loss,
    write_training_log,
)

from oracles import finite_diff_grad


# ---------------------------------------------------------------------------
# behavior cloning losses
# ---------------------------------------------------------------------------


def test_bc_continuous_perfect_imitation():
    pred = np.array([[1.0, 2.0], [3.0, 4.0]])
    loss, grad = bc_loss_continuous(pred, pred.copy())
    assert loss == 0.0
    assert np.array_equal(grad, np.zeros_like(pred))


def test_bc_continuous_unit_offset():
    pred = np.ones((1, 4))
    target = np.zeros((1, 4))
    loss, grad = bc_loss_continuous(pred, target)
    assert loss == pytest.approx(4.0)
    assert np.allclose(grad, 2.0)


def test_bc_continuous_finite_differences():
    rng = np.random.default_rng(0)
    pred = rng.standard_normal((6, 3))
    target = rng.standard_normal((6, 3))
    _, grad = bc_loss_continuous(pred, target)
    fd = finite_diff_grad(lambda p: bc_loss_continuous(p, target)[0], pred.copy())
    assert np.abs(grad - fd).max() <= 1e-6


def test_bc_continuous_shape_mismatch():
    with pytest.raises(ShapeError):
        bc_loss_continuous(np.zeros((2, 3)), np.zeros((3, 2)))


def test_bc_discrete_one_hot_correct():
    probs = np.eye(4)
    loss, grad = bc_loss_discrete(probs, np.arange(4))
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(grad, np.zeros_like(probs))


def test_bc_discrete_uniform_probs():
    b, c = 5, 8
    probs = np.full((b, c), 1.0 / c)
    loss, _ = bc_loss_discrete(probs, np.zeros(b, dtype=int))
    assert loss == pytest.approx(math.log(c))


def test_bc_discrete_rejects_bad_target():
    with pytest.raises(ShapeError):
        bc_loss_discrete(np.full((2, 3), 1 / 3), np.array([0, 3]))


def test_bc_discrete_finite_differences_at_logits():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((5, 4))
    targets = rng.integers(0, 4, size=5)

    def loss_of_logits(z):
        return bc_loss_discrete(softmax_rows(z), targets)[0]

    _, grad = bc_loss_discrete(softmax_rows(logits), targets)
    fd = finite_diff_grad(loss_of_logits, logits.copy())
    assert np.abs(grad - fd).max() <= 1e-5


# ---------------------------------------------------------------------------
# action diversity losses
# ---------------------------------------------------------------------------


def test_aer_continuous_identity_batch():
    loss, _ = aer_loss_continuous(np.eye(2))
    assert loss == pytest.approx(-2.0, abs=1e-10)


def test_aer_continuous_rank_one_batch_uses_jitter():
    actions = np.tile(np.array([1.0, 0.0]), (4, 1))
    loss, grad = aer_loss_continuous(actions)
    assert loss == pytest.approx(-2.0, abs=1e-10)
    assert grad.shape == actions.shape
    assert np.isfinite(grad).all()


def test_aer_continuous_needs_batch_of_two():
    with pytest.raises(ShapeError):
        aer_loss_continuous(np.ones((1, 3)))


def test_aer_continuous_finite_differences():
    rng = np.random.default_rng(2)
    actions = rng.standard_normal((16, 8))
    _, grad = aer_loss_continuous(actions)
    fd = finite_diff_grad(lambda a: -nuclear_norm(a), actions.copy())
    assert np.abs(grad - fd).max() <= 1e-5


def test_aer_discrete_uniform_rows_reach_max_entropy():
    b, c = 6, 5
    loss, _ = aer_loss_discrete(np.full((b, c), 1.0 / c))
    assert loss == pytest.approx(-math.log(c), abs=1e-12)


def test_aer_discrete_identical_one_hot_rows():
    probs = np.zeros((4, 3))
    probs[:, 1] = 1.0
    loss, _ = aer_loss_discrete(probs)
    assert loss == pytest.approx(0.0, abs=1e-9)


def test_aer_discrete_finite_differences():
    rng = np.random.default_rng(3)
    probs = softmax_rows(rng.standard_normal((6, 4)))
    _, grad = aer_loss_discrete(probs)
    fd = finite_diff_grad(lambda p: aer_loss_discrete(p)[0], probs.copy())
    assert np.abs(grad - fd).max() <= 1e-5


def test_softmax_grad_from_probs_chain_rule():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((5, 4))

    def loss_of_logits(z):
        return aer_loss_discrete(softmax_rows(z))[0]

    probs = softmax_rows(logits)
    _, grad_probs = aer_loss_discrete(probs)
    grad_logits = softmax_grad_from_probs(probs, grad_probs)
    fd = finite_diff_grad(loss_of_logits, logits.copy())
    assert np.abs(grad_logits - fd).max() <= 1e-5


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------


def _batches_for(policy, rng, batch=6):
    out = []
    for _ in range(policy.n_levels):
        states = rng.standard_normal((batch, policy.state_dim))
        if policy.head_kind == CONTINUOUS:
            targets = rng.standard_normal((batch, policy.out_dim))
        else:
            targets = rng.integers(0, policy.out_dim, size=batch)
        out.append((states, targets))
    return out


def test_total_loss_lambda_zero_is_pure_bc():
    rng = np.random.default_rng(5)
    policy = init_policy(4, 6, 3, CONTINUOUS, 3, seed=8)
    batches = _batches_for(policy, rng)
    report, grads = total_loss(policy, batches, TrainConfig(lam=0.0))
    assert report.total == pytest.approx(sum(r.bc for r in report.levels), abs=0)
    assert all(r.aer == 0.0 for r in report.levels)
    assert grads is not None


def test_total_loss_single_level_degenerate():
    rng = np.random.default_rng(6)
    policy = init_policy(4, 6, 3, CONTINUOUS, 1, seed=9)
    batches = _batches_for(policy, rng)
    report, _ = total_loss(policy, batches, TrainConfig(lam=0.01))
    assert len(report.levels) == 1
    assert report.total == pytest.approx(report.levels[0].total)


def test_total_loss_recomposition_identity():
    rng = np.random.default_rng(7)
    policy = init_policy(5, 6, 4, CONTINUOUS, 3, seed=10)
    batches = _batches_for(policy, rng, batch=8)
    cfg = TrainConfig(lam=0.03)
    report, _ = total_loss(policy, batches, cfg)
    recomputed = 0.0
    for row in report.levels:
        assert row.total == pytest.approx(row.bc + cfg.lam * row.aer, abs=1e-12)
        recomputed += row.bc + cfg.lam * row.aer
    assert report.total == pytest.approx(recomputed, abs=1e-9)


def test_total_loss_missing_level_flagged():
    rng = np.random.default_rng(8)
    policy = init_policy(4, 6, 3, CONTINUOUS, 3, seed=11)
    batches = _batches_for(policy, rng)
    batches[1] = None
    report, _ = total_loss(policy, batches, TrainConfig())
    assert report.skipped_levels == [2]
    assert [r.level for r in report.levels] == [1, 3]


def test_regularization_weight_monotonicity():
    rng = np.random.default_rng(9)
    for kind in (CONTINUOUS, DISCRETE):
        policy = init_policy(4, 6, 3, kind, 2, seed=12)
        batches = _batches_for(policy, rng)
        cfg1 = TrainConfig(lam=0.01, action_kind=kind, n_classes=3)
        cfg2 = TrainConfig(lam=0.05, action_kind=kind, n_classes=3)
        r1, _ = total_loss(policy, batches, cfg1, with_grads=False)
        r2, _ = total_loss(policy, batches, cfg2, with_grads=False)
        for a, b in zip(r1.levels, r2.levels):
            assert a.aer == pytest.approx(b.aer)
            assert a.aer < 0
            assert cfg2.lam * b.aer < cfg1.lam * a.aer


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_is_fixed_point():
    policy = init_policy(3, 4, 2, CONTINUOUS, 1, seed=0)
    before = [a.copy() for a in pol.param_arrays(policy)]
    state = AdamState.for_policy(policy)
    grads = pol.zero_grads(policy)
    assert adam_step(policy, grads, state, TrainConfig())
    for a, b in zip(pol.param_arrays(policy), before):
        assert np.array_equal(a, b)
    assert state.t == 1


def test_adam_first_step_closed_form():
    cfg = TrainConfig(learning_rate=0.1)
    policy = init_policy(1, 1, 1, CONTINUOUS, 1, seed=0)
    state = AdamState.for_policy(policy)
    grads = pol.zero_grads(policy)
    g = 0.37
    grads.encoder_weights[0][0, 0] = g
    w_before = policy.encoder.weights[0][0, 0]
    adam_step(policy, grads, state, cfg)
    expected = w_before - cfg.learning_rate * g / (abs(g) + cfg.adam_eps)
    assert policy.encoder.weights[0][0, 0] == pytest.approx(expected, abs=1e-12)


def test_adam_nonfinite_gradient_aborts():
    policy = init_policy(3, 4, 2, CONTINUOUS, 1, seed=1)
    before = [a.copy() for a in pol.param_arrays(policy)]
    state = AdamState.for_policy(policy)
    grads = pol.zero_grads(policy)
    grads.encoder_weights[0][0, 0] = np.nan
    assert not adam_step(policy, grads, state, TrainConfig())
    assert state.t == 0
    for a, b in zip(pol.param_arrays(policy), before):
        assert np.array_equal(a, b)


def test_adam_descends_quadratic_bowl():
    # Minimize |params|^2 with gradients 2p; the step size is small relative
    # to the starting point, so all 100 steps stay in the approach phase.
    cfg = TrainConfig(learning_rate=0.003)
    policy = init_policy(2, 3, 2, CONTINUOUS, 1, seed=5)
    state = AdamState.for_policy(policy)
    losses = []
    for _ in range(100):
        losses.append(sum(float((a * a).sum()) for a in pol.param_arrays(policy)))
        grads = pol.zero_grads(policy)
        for g, p in zip(pol.grad_arrays(grads), pol.param_arrays(policy)):
            g[...] = 2.0 * p
        adam_step(policy, grads, state, cfg)
    for i in range(5, 99):
        assert losses[i + 1] < losses[i]


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _toy_dataset(rng, n=90, d_s=4, d=3, k=2, discrete=False, linear=False):
    levels = []
    for _ in range(k):
        states = rng.standard_normal((n, d_s))
        if discrete:
            actions = rng.integers(0, 5, size=n)
        elif linear:
            m = rng.standard_normal((d_s, d)) * 0.5
            actions = states @ m
        else:
            actions = rng.standard_normal((n, d))
        levels.append(LevelData(states=states, actions=actions))
    return LeveledDataset(
        levels=levels,
        level_of_user={},
        boundaries=[0.0] * (k - 1),
        mode="return_time",
    )


def test_fit_zero_learning_rate_keeps_parameters():
    rng = np.random.default_rng(10)
    ds = _toy_dataset(rng)
    cfg = TrainConfig(epochs=1, learning_rate=0.0, lam=0.01, batch_size=16, seed=3, hidden=6)
    policy, _ = fit(ds, cfg)
    fresh = init_policy(4, 6, 3, CONTINUOUS, 2, seed=3)
    for a, b in zip(pol.param_arrays(policy), pol.param_arrays(fresh)):
        assert np.array_equal(a, b)


def test_fit_learns_realizable_linear_task():
    rng = np.random.default_rng(11)
    ds = _toy_dataset(rng, n=120, k=1, linear=True)
    cfg = TrainConfig(
        epochs=200, learning_rate=0.03, lam=0.0, batch_size=32, seed=4, hidden=16
    )
    policy, rows = fit(ds, cfg)
    final_bc = [r.bc_loss for r in rows if r.epoch == cfg.epochs][0]
    assert final_bc < 1e-3


def test_fit_regularization_raises_nuclear_norm():
    rng = np.random.default_rng(12)
    ds = _toy_dataset(rng, n=140, k=1, linear=True)
    norms = {}
    for lam in (0.0, 0.01):
        cfg = TrainConfig(epochs=30, learning_rate=3e-3, lam=lam, batch_size=32, seed=5, hidden=8)
        policy, _ = fit(ds, cfg)
        out, _ = forward(policy, 1, ds.levels[0].states[:64])
        norms[lam] = nuclear_norm(out)
    assert norms[0.01] > norms[0.0]


def test_fit_deterministic_logs():
    rng = np.random.default_rng(13)
    ds = _toy_dataset(rng, n=70)
    cfg = TrainConfig(epochs=3, learning_rate=1e-3, lam=0.01, batch_size=16, seed=6, hidden=6)
    _, rows1 = fit(ds, cfg)
    _, rows2 = fit(ds, cfg)
    assert rows1 == rows2


def test_fit_rejects_empty_level():
    ds = LeveledDataset(
        levels=[LevelData(states=np.zeros((0, 3)), actions=np.zeros((0, 2)))],
        level_of_user={},
        boundaries=[],
        mode="return_time",
    )
    with pytest.raises(ValueError, match="empty"):
        fit(ds, TrainConfig(epochs=1))


def test_fit_discrete_head_runs():
    rng = np.random.default_rng(14)
    ds = _toy_dataset(rng, n=60, discrete=True)
    cfg = TrainConfig(
        epochs=2, lam=0.01, batch_size=16, seed=7, hidden=6,
        action_kind=DISCRETE, n_classes=5,
    )
    policy, rows = fit(ds, cfg)
    probs, _ = forward(policy, 1, ds.levels[0].states[:10])
    assert np.abs(probs.sum(axis=1) - 1.0).max() <= 1e-9
    assert all(np.isfinite(r.total) for r in rows)


def test_training_log_roundtrip(tmp_path):
    rng = np.random.default_rng(15)
    ds = _toy_dataset(rng, n=50)
    cfg = TrainConfig(epochs=2, lam=0.01, batch_size=16, seed=8, hidden=6)
    _, rows = fit(ds, cfg)
    path = tmp_path / "log.csv"
    write_training_log(rows, path)
    assert read_training_log(path) == rows


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 2.0))
def test_loss_report_total_identity(seed, lam):
    rng = np.random.default_rng(seed)
    policy = init_policy(3, 5, 3, CONTINUOUS, 2, seed=seed % 1000)
    batches = _batches_for(policy, rng, batch=4)
    report, _ = total_loss(policy, batches, TrainConfig(lam=lam), with_grads=False)
    assert report.total == pytest.approx(
        sum(r.bc + lam * r.aer for r in report.levels), abs=1e-9
    )
