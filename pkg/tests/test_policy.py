import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import stratbc.policy as pol
from stratbc.linalg import ShapeError
from stratbc.policy import (
    CONTINUOUS,
    DISCRETE,
    EncoderParams,
    HeadKindError,
    PolicyParams,
    PredictorParams,
    StaleCacheError,
    backward,
    encode,
    forward,
    init_policy,
    load_checkpoint,
    policy_from_dict,
    policy_to_dict,
    predict_continuous,
    predict_discrete,
    save_checkpoint,
    softmax_rows,
)

from gradcheck import analytic_policy_grad, draw_instance, policy_fd_grad


def _zero_encoder(d_s, h):
    return EncoderParams(
        weights=[np.zeros((d_s, h)), np.zeros((h, h))],
        biases=[np.zeros(h), np.zeros(h)],
    )


def _identity_encoder(n):
    return EncoderParams(
        weights=[np.eye(n), np.eye(n)],
        biases=[np.zeros(n), np.zeros(n)],
    )


def _identity_predictor(n, kind=CONTINUOUS):
    return PredictorParams(
        kind=kind,
        weights=[np.eye(n), np.eye(n)],
        biases=[np.zeros(n), np.zeros(n)],
    )


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def test_encode_zero_network_gives_zero():
    enc = _zero_encoder(4, 3)
    out = encode(enc, np.random.default_rng(0).standard_normal((6, 4)))
    assert np.array_equal(out, np.zeros((6, 3)))


def test_encode_identity_path_passes_positive_input():
    enc = _identity_encoder(4)
    x = np.abs(np.random.default_rng(1).standard_normal((5, 4)))
    assert np.allclose(encode(enc, x), x, atol=0)


def test_encode_matches_naive_forward():
    rng = np.random.default_rng(3)
    policy = init_policy(5, 7, 2, CONTINUOUS, 1, seed=9)
    x = rng.standard_normal((4, 5))
    got = encode(policy.encoder, x)
    # Naive elementwise duplicate.
    expected = np.zeros((4, 7))
    for i in range(4):
        a = x[i]
        for w, b in zip(policy.encoder.weights, policy.encoder.biases):
            z = np.array([sum(a[r] * w[r, c] for r in range(w.shape[0])) + b[c]
                          for c in range(w.shape[1])])
            a = np.maximum(z, 0.0)
        expected[i] = a
    assert np.allclose(got, expected, atol=1e-12)


def test_encode_shape_mismatch_rejected():
    enc = _zero_encoder(4, 3)
    with pytest.raises(ShapeError):
        encode(enc, np.zeros((2, 5)))


def test_predict_continuous_zero_params():
    pred = PredictorParams(
        kind=CONTINUOUS,
        weights=[np.zeros((3, 3)), np.zeros((3, 2))],
        biases=[np.zeros(3), np.zeros(2)],
    )
    assert np.array_equal(predict_continuous(pred, np.ones((4, 3))), np.zeros((4, 2)))


def test_predict_continuous_identity_passthrough():
    pred = _identity_predictor(3)
    h = np.abs(np.random.default_rng(2).standard_normal((5, 3)))
    assert np.allclose(predict_continuous(pred, h), h, atol=0)


def test_predict_continuous_matches_naive():
    rng = np.random.default_rng(8)
    policy = init_policy(4, 6, 3, CONTINUOUS, 1, seed=2)
    h = rng.standard_normal((3, 6))
    pred = policy.predictors[0]
    got = predict_continuous(pred, h)
    hidden = np.maximum(h @ pred.weights[0] + pred.biases[0], 0.0)
    expected = hidden @ pred.weights[1] + pred.biases[1]
    assert np.allclose(got, expected, atol=1e-12)


def test_head_kind_mismatch_rejected():
    cont = _identity_predictor(3, CONTINUOUS)
    disc = _identity_predictor(3, DISCRETE)
    with pytest.raises(HeadKindError):
        predict_discrete(cont, np.zeros((1, 3)))
    with pytest.raises(HeadKindError):
        predict_continuous(disc, np.zeros((1, 3)))


def test_predict_discrete_uniform_on_zero_logits():
    pred = PredictorParams(
        kind=DISCRETE,
        weights=[np.zeros((3, 3)), np.zeros((3, 5))],
        biases=[np.zeros(3), np.zeros(5)],
    )
    probs = predict_discrete(pred, np.ones((2, 3)))
    assert np.allclose(probs, 0.2, atol=1e-12)


def test_softmax_saturation_is_one_hot():
    logits = np.zeros((1, 4))
    logits[0, 2] = 1000.0
    probs = softmax_rows(logits)
    expected = np.zeros(4)
    expected[2] = 1.0
    assert np.abs(probs[0] - expected).max() <= 1e-9


def test_softmax_matches_naive_max_shift():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((6, 5)) * 3
    got = softmax_rows(logits)
    for i in range(6):
        shifted = logits[i] - logits[i].max()
        expected = np.exp(shifted) / np.exp(shifted).sum()
        assert np.allclose(got[i], expected, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6), st.integers(2, 9))
def test_softmax_rows_are_distributions(seed, rows, cols):
    rng = np.random.default_rng(seed)
    probs = softmax_rows(rng.standard_normal((rows, cols)) * 50)
    assert np.all(probs >= 0)
    assert np.abs(probs.sum(axis=1) - 1.0).max() <= 1e-9


def test_forward_determinism_bit_identical():
    policy, states = draw_instance(0)
    out1, _ = forward(policy, 1, states)
    out2, _ = forward(policy, 1, states)
    assert np.array_equal(out1, out2)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_zero_upstream_gradient():
    policy, states = draw_instance(1)
    out, cache = forward(policy, 1, states)
    grads = backward(policy, 1, np.zeros_like(out), cache)
    for g in pol.grad_arrays(grads):
        assert np.array_equal(g, np.zeros_like(g))


def test_backward_scalar_network_hand_derived():
    # 1-wide network, all activations positive: a pure scalar chain rule.
    w1, b1, w2, b2 = 0.7, 0.1, 1.3, 0.2
    v1, c1, v2, c2 = 0.9, 0.05, 1.1, 0.3
    x, g = 2.0, 1.0
    policy = PolicyParams(
        encoder=EncoderParams(
            weights=[np.array([[w1]]), np.array([[w2]])],
            biases=[np.array([b1]), np.array([b2])],
        ),
        predictors=[
            PredictorParams(
                kind=CONTINUOUS,
                weights=[np.array([[v1]]), np.array([[v2]])],
                biases=[np.array([c1]), np.array([c2])],
            )
        ],
    )
    out, cache = forward(policy, 1, np.array([[x]]))
    z1 = x * w1 + b1
    z2 = z1 * w2 + b2
    z3 = z2 * v1 + c1
    assert out[0, 0] == pytest.approx(z3 * v2 + c2, abs=1e-12)
    grads = backward(policy, 1, np.array([[g]]), cache)
    assert grads.predictor_weights[0][1][0, 0] == pytest.approx(g * z3, abs=1e-12)
    assert grads.predictor_biases[0][1][0] == pytest.approx(g, abs=1e-12)
    assert grads.predictor_weights[0][0][0, 0] == pytest.approx(g * v2 * z2, abs=1e-12)
    assert grads.encoder_weights[1][0, 0] == pytest.approx(g * v2 * v1 * z1, abs=1e-12)
    assert grads.encoder_weights[0][0, 0] == pytest.approx(g * v2 * v1 * w2 * x, abs=1e-12)
    assert grads.encoder_biases[0][0] == pytest.approx(g * v2 * v1 * w2, abs=1e-12)


def test_backward_matches_finite_differences():
    policy, states = draw_instance(2)
    rng = np.random.default_rng(99)
    g = rng.standard_normal((states.shape[0], policy.out_dim))
    analytic = analytic_policy_grad(policy, 2, states, g)
    fd = policy_fd_grad(policy, 2, states, lambda out: float((out * g).sum()))
    assert np.abs(analytic - fd).max() <= 1e-4


def test_backward_requires_matching_cache():
    policy, states = draw_instance(3)
    out, cache = forward(policy, 1, states)
    with pytest.raises(StaleCacheError):
        backward(policy, 2, np.zeros_like(out), cache)
    with pytest.raises(StaleCacheError):
        backward(policy, 1, np.zeros((1, policy.out_dim)), cache)


def test_backward_other_levels_get_zero_grads():
    policy, states = draw_instance(4, n_levels=3)
    out, cache = forward(policy, 2, states)
    grads = backward(policy, 2, np.ones_like(out), cache)
    for level in (1, 3):
        for g in grads.predictor_weights[level - 1] + grads.predictor_biases[level - 1]:
            assert np.array_equal(g, np.zeros_like(g))
    assert any(np.abs(g).max() > 0 for g in grads.encoder_weights)


def test_encoder_shared_other_heads_bit_identical_after_step():
    from stratbc.train import AdamState, TrainConfig, adam_step

    policy, states = draw_instance(5, n_levels=3)
    before = [
        [w.copy() for w in p.weights] + [b.copy() for b in p.biases]
        for p in policy.predictors
    ]
    enc_before = [w.copy() for w in policy.encoder.weights]
    out, cache = forward(policy, 2, states)
    grads = backward(policy, 2, np.ones_like(out), cache)
    adam_step(policy, grads, AdamState.for_policy(policy), TrainConfig())
    for level in (1, 3):
        after = list(policy.predictors[level - 1].weights) + list(
            policy.predictors[level - 1].biases
        )
        for a, b in zip(after, before[level - 1]):
            assert np.array_equal(a, b)
    assert any(
        not np.array_equal(a, b) for a, b in zip(policy.encoder.weights, enc_before)
    )
    assert any(
        not np.array_equal(a, b)
        for a, b in zip(policy.predictors[1].weights, before[1][:2])
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_byte_identical(tmp_path):
    policy = init_policy(6, 8, 4, DISCRETE, 3, seed=31)
    p1 = tmp_path / "a.json"
    p2 = tmp_path / "b.json"
    save_checkpoint(policy, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for a, b in zip(pol.param_arrays(policy), pol.param_arrays(loaded)):
        assert np.array_equal(a, b)


def test_checkpoint_rejects_unknown_format():
    with pytest.raises(ValueError):
        policy_from_dict({"format": "something-else"})


def test_checkpoint_dict_carries_shapes_and_kinds():
    policy = init_policy(6, 8, 4, CONTINUOUS, 2, seed=1)
    doc = policy_to_dict(policy)
    assert doc["state_dim"] == 6
    assert doc["hidden_dim"] == 8
    assert doc["out_dim"] == 4
    assert doc["head_kind"] == CONTINUOUS
    assert doc["n_levels"] == 2
