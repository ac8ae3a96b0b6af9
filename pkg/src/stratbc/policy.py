"""Shared-encoder, multi-head MLP policy with exact forward/backward passes.

One state encoder is shared by all expert levels; each level owns an action
predictor head. Heads are either continuous (a d-dimensional action embedding)
or discrete (a softmax over C items). Backward passes are hand-derived and
checked against finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .jsonio import canonical_dumps, read_json
from .linalg import ShapeError, as_matrix

CONTINUOUS = "continuous"
DISCRETE = "discrete"

CHECKPOINT_FORMAT = "stratbc-policy-v1"


class HeadKindError(ValueError):
    """A predictor head was used through the wrong-kind entry point."""


class StaleCacheError(ValueError):
    """backward() was called without a matching cached forward pass."""


@dataclass
class EncoderParams:
    """Two ReLU layers mapping state_dim -> hidden -> hidden."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class PredictorParams:
    """One ReLU hidden layer plus a linear output head for a single level."""

    kind: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class PolicyParams:
    encoder: EncoderParams
    predictors: list[PredictorParams]

    @property
    def n_levels(self) -> int:
        return len(self.predictors)

    @property
    def state_dim(self) -> int:
        return self.encoder.weights[0].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.encoder.weights[-1].shape[1]

    @property
    def out_dim(self) -> int:
        return self.predictors[0].weights[-1].shape[1]

    @property
    def head_kind(self) -> str:
        return self.predictors[0].kind


@dataclass
class PolicyGrads:
    """Gradient arrays mirroring PolicyParams shapes, one entry per level."""

    encoder_weights: list[np.ndarray]
    encoder_biases: list[np.ndarray]
    predictor_weights: list[list[np.ndarray]]
    predictor_biases: list[list[np.ndarray]]


@dataclass
class ForwardCache:
    level: int
    states: np.ndarray
    enc_pre: list[np.ndarray] = field(default_factory=list)
    enc_act: list[np.ndarray] = field(default_factory=list)
    head_pre: list[np.ndarray] = field(default_factory=list)
    head_act: list[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.head_act[-1]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_policy(
    state_dim: int,
    hidden: int,
    out_dim: int,
    kind: str,
    n_levels: int,
    seed: int,
) -> PolicyParams:
    """Seeded Glorot-uniform initialization, biases at zero."""
    if kind not in (CONTINUOUS, DISCRETE):
        raise HeadKindError(f"unknown head kind {kind!r}")
    if n_levels < 1:
        raise ShapeError("a policy needs at least one level")
    rng = np.random.default_rng(seed)
    encoder = EncoderParams(
        weights=[_glorot(rng, state_dim, hidden), _glorot(rng, hidden, hidden)],
        biases=[np.zeros(hidden), np.zeros(hidden)],
    )
    predictors = []
    for _ in range(n_levels):
        predictors.append(
            PredictorParams(
                kind=kind,
                weights=[_glorot(rng, hidden, hidden), _glorot(rng, hidden, out_dim)],
                biases=[np.zeros(hidden), np.zeros(out_dim)],
            )
        )
    return PolicyParams(encoder=encoder, predictors=predictors)


def encode(params: EncoderParams, states, cache: ForwardCache | None = None) -> np.ndarray:
    """Deterministic encoder forward pass; ReLU after each layer."""
    x = as_matrix(states, "states")
    if x.shape[1] != params.weights[0].shape[0]:
        raise ShapeError(
            f"states have dimension {x.shape[1]}, encoder expects {params.weights[0].shape[0]}"
        )
    act = x
    for w, b in zip(params.weights, params.biases):
        pre = act @ w + b
        act = np.maximum(pre, 0.0)
        if cache is not None:
            cache.enc_pre.append(pre)
            cache.enc_act.append(act)
    return act


def _head_forward(params: PredictorParams, h, cache: ForwardCache | None = None) -> np.ndarray:
    h = as_matrix(h, "state representation")
    if h.shape[1] != params.weights[0].shape[0]:
        raise ShapeError(
            f"representation has dimension {h.shape[1]}, head expects {params.weights[0].shape[0]}"
        )
    pre1 = h @ params.weights[0] + params.biases[0]
    act1 = np.maximum(pre1, 0.0)
    out = act1 @ params.weights[1] + params.biases[1]
    if cache is not None:
        cache.head_pre.append(pre1)
        cache.head_act.append(act1)
        cache.head_act.append(out)
    return out


def predict_continuous(params: PredictorParams, h) -> np.ndarray:
    if params.kind != CONTINUOUS:
        raise HeadKindError("predict_continuous called on a discrete head")
    return _head_forward(params, h)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for numerical stability."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def predict_discrete(params: PredictorParams, h) -> np.ndarray:
    if params.kind != DISCRETE:
        raise HeadKindError("predict_discrete called on a continuous head")
    return softmax_rows(_head_forward(params, h))


def forward(policy: PolicyParams, level: int, states) -> tuple[np.ndarray, ForwardCache]:
    """Full pass through the encoder and the level's head, caching activations.

    ``level`` is 1-based. Returns the action matrix for continuous heads and
    row-stochastic probabilities for discrete heads; the cached head output is
    always the linear layer (logits for discrete heads), which is what
    :func:`backward` expects gradients against.
    """
    if not 1 <= level <= policy.n_levels:
        raise ShapeError(f"level {level} outside 1..{policy.n_levels}")
    cache = ForwardCache(level=level, states=as_matrix(states, "states"))
    h = encode(policy.encoder, cache.states, cache)
    out = _head_forward(policy.predictors[level - 1], h, cache)
    if policy.predictors[level - 1].kind == DISCRETE:
        return softmax_rows(out), cache
    return out, cache


def zero_grads(policy: PolicyParams) -> PolicyGrads:
    return PolicyGrads(
        encoder_weights=[np.zeros_like(w) for w in policy.encoder.weights],
        encoder_biases=[np.zeros_like(b) for b in policy.encoder.biases],
        predictor_weights=[[np.zeros_like(w) for w in p.weights] for p in policy.predictors],
        predictor_biases=[[np.zeros_like(b) for b in p.biases] for p in policy.predictors],
    )


def backward(
    policy: PolicyParams,
    level: int,
    loss_grad_at_output,
    cache: ForwardCache,
) -> PolicyGrads:
    """Backpropagate a loss gradient taken at the head's linear output.

    Only the shared encoder and the level's own head receive nonzero
    gradients; other heads stay at zero. The cache must come from a
    :func:`forward` call with the same level and batch.
    """
    grad_out = as_matrix(loss_grad_at_output, "output gradient")
    if cache is None or cache.level != level:
        raise StaleCacheError(
            f"no cached forward pass for level {level}; run forward() first"
        )
    if grad_out.shape != cache.output.shape:
        raise StaleCacheError(
            f"gradient shape {grad_out.shape} does not match cached output "
            f"{cache.output.shape}"
        )

    grads = zero_grads(policy)
    head = policy.predictors[level - 1]
    act1 = cache.head_act[0]
    pre1 = cache.head_pre[0]
    h = cache.enc_act[-1]

    grads.predictor_weights[level - 1][1] = act1.T @ grad_out
    grads.predictor_biases[level - 1][1] = grad_out.sum(axis=0)
    d_act1 = grad_out @ head.weights[1].T
    d_pre1 = d_act1 * (pre1 > 0.0)
    grads.predictor_weights[level - 1][0] = h.T @ d_pre1
    grads.predictor_biases[level - 1][0] = d_pre1.sum(axis=0)

    d_h = d_pre1 @ head.weights[0].T
    for i in reversed(range(len(policy.encoder.weights))):
        d_pre = d_h * (cache.enc_pre[i] > 0.0)
        inputs = cache.enc_act[i - 1] if i > 0 else cache.states
        grads.encoder_weights[i] = inputs.T @ d_pre
        grads.encoder_biases[i] = d_pre.sum(axis=0)
        d_h = d_pre @ policy.encoder.weights[i].T
    return grads


def param_arrays(policy: PolicyParams) -> list[np.ndarray]:
    """Parameter arrays in a fixed canonical order (encoder first, then heads)."""
    arrays = list(policy.encoder.weights) + list(policy.encoder.biases)
    for pred in policy.predictors:
        arrays.extend(pred.weights)
        arrays.extend(pred.biases)
    return arrays


def grad_arrays(grads: PolicyGrads) -> list[np.ndarray]:
    """Gradient arrays in the same canonical order as :func:`param_arrays`."""
    arrays = list(grads.encoder_weights) + list(grads.encoder_biases)
    for w, b in zip(grads.predictor_weights, grads.predictor_biases):
        arrays.extend(w)
        arrays.extend(b)
    return arrays


def accumulate_grads(total: PolicyGrads, extra: PolicyGrads) -> None:
    """In-place sum, used to pool encoder gradients across levels."""
    for dst, src in zip(grad_arrays(total), grad_arrays(extra)):
        dst += src


def clone_policy(policy: PolicyParams) -> PolicyParams:
    return PolicyParams(
        encoder=EncoderParams(
            weights=[w.copy() for w in policy.encoder.weights],
            biases=[b.copy() for b in policy.encoder.biases],
        ),
        predictors=[
            PredictorParams(
                kind=p.kind,
                weights=[w.copy() for w in p.weights],
                biases=[b.copy() for b in p.biases],
            )
            for p in policy.predictors
        ],
    )


def policy_to_dict(policy: PolicyParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "state_dim": policy.state_dim,
        "hidden_dim": policy.hidden_dim,
        "out_dim": policy.out_dim,
        "head_kind": policy.head_kind,
        "n_levels": policy.n_levels,
        "encoder": {
            "weights": [w.tolist() for w in policy.encoder.weights],
            "biases": [b.tolist() for b in policy.encoder.biases],
        },
        "predictors": [
            {
                "kind": p.kind,
                "weights": [w.tolist() for w in p.weights],
                "biases": [b.tolist() for b in p.biases],
            }
            for p in policy.predictors
        ],
    }


def policy_from_dict(doc: dict) -> PolicyParams:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format {doc.get('format')!r}")
    encoder = EncoderParams(
        weights=[np.array(w, dtype=float) for w in doc["encoder"]["weights"]],
        biases=[np.array(b, dtype=float) for b in doc["encoder"]["biases"]],
    )
    predictors = [
        PredictorParams(
            kind=p["kind"],
            weights=[np.array(w, dtype=float) for w in p["weights"]],
            biases=[np.array(b, dtype=float) for b in p["biases"]],
        )
        for p in doc["predictors"]
    ]
    return PolicyParams(encoder=encoder, predictors=predictors)


def save_checkpoint(policy: PolicyParams, path) -> None:
    from pathlib import Path

    Path(path).write_text(canonical_dumps(policy_to_dict(policy)) + "\n", encoding="utf-8")


def load_checkpoint(path) -> PolicyParams:
    return policy_from_dict(read_json(path))
