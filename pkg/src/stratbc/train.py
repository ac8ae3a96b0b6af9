"""Training objective and optimization loop.

Each level contributes a behavior cloning loss (batch-mean MSE for continuous
heads, batch-mean cross-entropy for discrete heads) plus an action diversity
regularizer weighted by ``lam``: the negated nuclear norm of the predicted
action batch, or the negated entropy of the batch-averaged class
probabilities. Levels are visited round-robin within an epoch and the shared
encoder is updated by every step; everything is deterministic for a fixed
``(dataset, config)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import policy as pol
from .linalg import (
    RANK_TOL,
    DegenerateSubgradientError,
    ShapeError,
    as_matrix,
    nuclear_norm_grad,
    svd,
)
from .policy import CONTINUOUS, DISCRETE, PolicyGrads, PolicyParams
from .stratify import LeveledDataset

PROB_FLOOR = 1e-12
JITTER_SCALE = 1e-8
SNAPSHOT_ROW_CAP = 4096


class TrainingStepError(RuntimeError):
    """A training step could not produce usable gradients."""


@dataclass
class TrainConfig:
    action_kind: str = CONTINUOUS
    batch_size: int = 128
    lam: float = 0.01
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 6
    seed: int = 0
    hidden: int = 32
    n_classes: int = 0

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        # Zero is allowed so a frozen-optimizer epoch is expressible.
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epoch count must be nonnegative, got {self.epochs}")
        if self.action_kind not in (CONTINUOUS, DISCRETE):
            raise ValueError(f"unknown action kind {self.action_kind!r}")
        if self.action_kind == DISCRETE and self.n_classes < 2:
            raise ValueError("discrete training requires n_classes >= 2")


# ---------------------------------------------------------------------------
# Losses (each returns the scalar and its gradient)
# ---------------------------------------------------------------------------


def bc_loss_continuous(pred, target) -> tuple[float, np.ndarray]:
    """Batch-mean squared error; gradient taken at the predictions."""
    pred = as_matrix(pred, "predictions")
    target = as_matrix(target, "targets")
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    b = pred.shape[0]
    diff = pred - target
    loss = float((diff * diff).sum()) / b
    return loss, 2.0 * diff / b


def bc_loss_discrete(probs, targets) -> tuple[float, np.ndarray]:
    """Batch-mean cross-entropy; gradient taken at the logits."""
    probs = as_matrix(probs, "probabilities")
    targets = np.asarray(targets, dtype=int)
    b, c = probs.shape
    if targets.shape != (b,):
        raise ShapeError(f"need {b} target indices, got shape {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= c:
        raise ShapeError(f"target index outside 0..{c - 1}")
    picked = np.maximum(probs[np.arange(b), targets], PROB_FLOOR)
    loss = float(-np.log(picked).sum()) / b
    grad = probs.copy()
    grad[np.arange(b), targets] -= 1.0
    return loss, grad / b


def aer_loss_continuous(actions) -> tuple[float, np.ndarray]:
    """Negated nuclear norm of the predicted action batch.

    Minimizing this spreads the batch across action directions. At a
    near-rank-deficient point the gradient is retried once after adding a
    diagonal jitter of ``JITTER_SCALE``; persistent failure aborts the step.
    One decomposition serves both the loss and its gradient.
    """
    actions = as_matrix(actions, "action batch")
    if actions.shape[0] < 2:
        raise ShapeError(f"diversity term needs a batch of at least 2, got {actions.shape[0]}")
    res = svd(actions)
    loss = -float(res.singular_values.sum())
    if float(res.singular_values[-1]) > RANK_TOL:
        return loss, -(res.u @ res.v.T)
    jittered = actions.copy()
    r = min(actions.shape)
    jittered[np.arange(r), np.arange(r)] += JITTER_SCALE
    try:
        grad = -nuclear_norm_grad(jittered)
    except DegenerateSubgradientError as exc:
        raise TrainingStepError(
            "action batch stayed rank-deficient after jitter; cannot differentiate "
            "the diversity term"
        ) from exc
    return loss, grad


def aer_loss_discrete(probs) -> tuple[float, np.ndarray]:
    """Negated entropy of the batch-averaged class probabilities.

    The gradient is taken at the probabilities; convert with
    :func:`softmax_grad_from_probs` before backpropagating through logits.
    """
    probs = as_matrix(probs, "probabilities")
    b = probs.shape[0]
    mean = np.maximum(probs.mean(axis=0), PROB_FLOOR)
    loss = float((mean * np.log(mean)).sum())
    grad = np.tile((np.log(mean) + 1.0) / b, (b, 1))
    return loss, grad


def softmax_grad_from_probs(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient at softmax outputs back to the logits."""
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


# ---------------------------------------------------------------------------
# Combined objective
# ---------------------------------------------------------------------------


@dataclass
class LevelLoss:
    level: int
    bc: float
    aer: float
    total: float


@dataclass
class LossReport:
    levels: list[LevelLoss]
    lam: float
    total: float
    skipped_levels: list[int] = field(default_factory=list)


def _level_losses(
    policy: PolicyParams, level: int, states, actions, lam: float
) -> tuple[float, float, np.ndarray, pol.ForwardCache]:
    out, cache = pol.forward(policy, level, states)
    if policy.head_kind == CONTINUOUS:
        bc, g_bc = bc_loss_continuous(out, actions)
        if lam > 0.0:
            aer, g_aer = aer_loss_continuous(out)
            grad_out = g_bc + lam * g_aer
        else:
            aer, grad_out = 0.0, g_bc
    else:
        bc, g_bc = bc_loss_discrete(out, actions)
        if lam > 0.0:
            aer, g_aer_probs = aer_loss_discrete(out)
            grad_out = g_bc + lam * softmax_grad_from_probs(out, g_aer_probs)
        else:
            aer, grad_out = 0.0, g_bc
    return bc, aer, grad_out, cache


def total_loss(
    policy: PolicyParams,
    level_batches: list[tuple[np.ndarray, np.ndarray] | None],
    cfg: TrainConfig,
    with_grads: bool = True,
) -> tuple[LossReport, PolicyGrads | None]:
    """Evaluate the full objective over one batch per level.

    Missing batches (``None``) are skipped and flagged. Encoder gradients are
    accumulated across levels in level order; each head's gradient comes from
    its own level only.
    """
    if len(level_batches) != policy.n_levels:
        raise ShapeError(
            f"need one batch slot per level ({policy.n_levels}), got {len(level_batches)}"
        )
    grads = pol.zero_grads(policy) if with_grads else None
    rows: list[LevelLoss] = []
    skipped: list[int] = []
    total = 0.0
    for level in range(1, policy.n_levels + 1):
        batch = level_batches[level - 1]
        if batch is None:
            skipped.append(level)
            continue
        states, actions = batch
        bc, aer, grad_out, cache = _level_losses(policy, level, states, actions, cfg.lam)
        level_total = bc + cfg.lam * aer
        rows.append(LevelLoss(level=level, bc=bc, aer=aer, total=level_total))
        total += level_total
        if grads is not None:
            pol.accumulate_grads(grads, pol.backward(policy, level, grad_out, cache))
    return LossReport(levels=rows, lam=cfg.lam, total=total, skipped_levels=skipped), grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_policy(cls, policy: PolicyParams) -> "AdamState":
        arrays = pol.param_arrays(policy)
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays])


def adam_step(
    policy: PolicyParams, grads: PolicyGrads, state: AdamState, cfg: TrainConfig
) -> bool:
    """Standard bias-corrected Adam update, applied in place.

    Returns False (and leaves parameters and moments untouched) when any
    gradient entry is non-finite.
    """
    garrays = pol.grad_arrays(grads)
    if any(not np.isfinite(g).all() for g in garrays):
        return False
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for p, g, m, v in zip(pol.param_arrays(policy), garrays, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= cfg.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + cfg.adam_eps)
    return True


# ---------------------------------------------------------------------------
# Fit loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRow:
    """One training-log row: full-objective snapshot for one (epoch, level)."""

    epoch: int
    level: int
    bc_loss: float
    aer_loss: float
    total: float
    grad_norm: float


def snapshot_batches(dataset: LeveledDataset, cap: int = SNAPSHOT_ROW_CAP):
    """Deterministic per-level evaluation slices used for the epoch log."""
    return [
        (level.states[: min(level.size, cap)], level.actions[: min(level.size, cap)])
        for level in dataset.levels
    ]


def _grad_norm(grads: PolicyGrads) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in pol.grad_arrays(grads)))


def fit(
    dataset: LeveledDataset,
    cfg: TrainConfig,
    on_epoch=None,
) -> tuple[PolicyParams, list[EpochRow]]:
    """Train a fresh policy on the leveled dataset.

    Per epoch, each level's pairs are reshuffled with an independent seeded
    permutation and chopped into batches; steps rotate level 1, 2, ..., K so
    the shared encoder sees balanced updates. The returned rows snapshot the
    full objective on fixed evaluation slices after every epoch (epoch 0 is
    the initialization point). ``on_epoch(epoch, policy)`` is invoked at each
    snapshot for checkpointing.
    """
    cfg = replace(cfg)
    cfg.validate()
    k = dataset.n_levels
    if k < 1:
        raise ValueError("dataset has no levels")
    for idx, level in enumerate(dataset.levels, start=1):
        if level.size == 0:
            raise ValueError(f"level {idx} dataset is empty; cannot train its head")

    state_dim = dataset.levels[0].states.shape[1]
    if cfg.action_kind == CONTINUOUS:
        out_dim = dataset.levels[0].actions.shape[1]
    else:
        out_dim = cfg.n_classes
        for idx, level in enumerate(dataset.levels, start=1):
            if level.actions.size and int(level.actions.max()) >= out_dim:
                raise ValueError(f"level {idx} contains an action index >= n_classes")

    policy = pol.init_policy(state_dim, cfg.hidden, out_dim, cfg.action_kind, k, cfg.seed)
    adam = AdamState.for_policy(policy)
    eval_slices = snapshot_batches(dataset)

    rows = _snapshot_rows(policy, eval_slices, cfg, epoch=0, grad_norms=[0.0] * k)
    if on_epoch is not None:
        on_epoch(0, policy)

    for epoch in range(1, cfg.epochs + 1):
        level_batches = []
        for level in range(1, k + 1):
            rng = np.random.default_rng([cfg.seed, epoch, level])
            perm = rng.permutation(dataset.levels[level - 1].size)
            chunks = [
                perm[i : i + cfg.batch_size] for i in range(0, perm.size, cfg.batch_size)
            ]
            # A lone trailing sample cannot carry the batch diversity term.
            if chunks and chunks[-1].size == 1 and len(chunks) > 1:
                chunks.pop()
            level_batches.append(chunks)

        steps = max(len(chunks) for chunks in level_batches)
        norm_sums = [0.0] * k
        norm_counts = [0] * k
        for step in range(steps):
            for level in range(1, k + 1):
                chunks = level_batches[level - 1]
                idx = chunks[step % len(chunks)]
                data = dataset.levels[level - 1]
                bc, aer, grad_out, cache = _level_losses(
                    policy, level, data.states[idx], data.actions[idx], cfg.lam
                )
                grads = pol.backward(policy, level, grad_out, cache)
                if not adam_step(policy, grads, adam, cfg):
                    raise TrainingStepError(
                        f"non-finite gradient at epoch {epoch}, level {level}"
                    )
                norm_sums[level - 1] += _grad_norm(grads)
                norm_counts[level - 1] += 1

        grad_norms = [
            norm_sums[i] / norm_counts[i] if norm_counts[i] else 0.0 for i in range(k)
        ]
        rows.extend(_snapshot_rows(policy, eval_slices, cfg, epoch, grad_norms))
        if on_epoch is not None:
            on_epoch(epoch, policy)
    return policy, rows


def _snapshot_rows(policy, eval_slices, cfg, epoch, grad_norms) -> list[EpochRow]:
    report, _ = total_loss(policy, eval_slices, cfg, with_grads=False)
    return [
        EpochRow(
            epoch=epoch,
            level=row.level,
            bc_loss=row.bc,
            aer_loss=row.aer,
            total=row.total,
            grad_norm=grad_norms[row.level - 1],
        )
        for row in report.levels
    ]


LOG_COLUMNS = ["epoch", "level", "bc_loss", "aer_loss", "total", "grad_norm"]


def write_training_log(rows: list[EpochRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow(
                [r.epoch, r.level, repr(r.bc_loss), repr(r.aer_loss), repr(r.total), repr(r.grad_norm)]
            )


def read_training_log(path) -> list[EpochRow]:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(
                EpochRow(
                    epoch=int(rec["epoch"]),
                    level=int(rec["level"]),
                    bc_loss=float(rec["bc_loss"]),
                    aer_loss=float(rec["aer_loss"]),
                    total=float(rec["total"]),
                    grad_norm=float(rec["grad_norm"]),
                )
            )
    return rows
