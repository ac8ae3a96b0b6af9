"""Inference-time expert routing.

For each level, K-means centroids over encoded expert states summarize what
that stratum's users look like; a state is routed to the best (lowest index)
level whose centroid bank it sits within threshold distance of, falling back
to the globally nearest bank, and finally capped by the user's own historical
retention level so served quality never degrades below it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .jsonio import read_json, write_json
from .linalg import ShapeError, as_matrix, kmeans
from .policy import CONTINUOUS, PolicyParams, encode, predict_continuous, predict_discrete
from .stratify import ACTIVE_DAYS, RETURN_TIME, level_for_score

BANK_FORMAT = "stratbc-centroid-bank-v1"
THRESHOLD_FLOOR = 1e-12


class SelectError(ValueError):
    """Centroid bank construction or routing preconditions violated."""


@dataclass
class CentroidBank:
    """Per-level centroid matrices and acceptance thresholds."""

    centroids: list[np.ndarray]
    thresholds: list[float]

    @property
    def n_levels(self) -> int:
        return len(self.centroids)

    def __post_init__(self):
        if len(self.thresholds) != len(self.centroids):
            raise SelectError("one threshold per level required")
        for delta in self.thresholds:
            if not (delta > 0.0) or not math.isfinite(delta):
                raise SelectError(f"thresholds must be positive and finite, got {delta}")


@dataclass
class SelectionTrace:
    """Audit record of one routing decision; levels are 1-based."""

    distances: list[float]
    chosen_pre_cap: int
    historical_level: int
    final_level: int
    fallback_used: bool


def half_mean_pairwise_distance(centroids: np.ndarray) -> float:
    """Half the mean Euclidean distance over unordered centroid pairs."""
    c = centroids.shape[0]
    total = 0.0
    count = 0
    for i in range(c - 1):
        diffs = centroids[i + 1 :] - centroids[i]
        total += float(np.sqrt((diffs * diffs).sum(axis=1)).sum())
        count += c - 1 - i
    if count == 0:
        raise SelectError("need at least two centroids for a pairwise distance")
    return 0.5 * total / count


def _level_seed(seed: int, level: int) -> int:
    return int(np.random.SeedSequence([seed, level]).generate_state(1)[0])


def build_centroids(
    policy: PolicyParams,
    leveled_states: list[np.ndarray],
    clusters_per_level: int,
    seed: int,
) -> CentroidBank:
    """Cluster each level's encoded expert states and derive its threshold.

    The threshold is half the mean inter-centroid distance within the level.
    With a single cluster per level there are no centroid pairs, so half the
    mean distance of the level's encoded states to the centroid is used
    instead (floored at a tiny positive value).
    """
    if clusters_per_level < 1:
        raise SelectError(f"clusters_per_level must be >= 1, got {clusters_per_level}")
    centroids = []
    thresholds = []
    for idx, states in enumerate(leveled_states, start=1):
        states = as_matrix(states, f"level {idx} states")
        if states.shape[0] < clusters_per_level:
            raise SelectError(
                f"level {idx} has {states.shape[0]} states, fewer than the "
                f"{clusters_per_level} clusters requested"
            )
        encoded = encode(policy.encoder, states)
        model = kmeans(encoded, clusters_per_level, _level_seed(seed, idx))
        centroids.append(model.centroids)
        if clusters_per_level >= 2:
            delta = half_mean_pairwise_distance(model.centroids)
        else:
            spread = np.sqrt(((encoded - model.centroids[0]) ** 2).sum(axis=1)).mean()
            delta = 0.5 * float(spread)
        thresholds.append(max(delta, THRESHOLD_FLOOR))
    return CentroidBank(centroids=centroids, thresholds=thresholds)


def min_distance_to_bank(h: np.ndarray, centroids: np.ndarray) -> float:
    diffs = centroids - h
    return float(np.sqrt((diffs * diffs).sum(axis=1)).min())


def select_from_encoded(h: np.ndarray, bank: CentroidBank, r_h: int) -> SelectionTrace:
    """Routing rule on an already-encoded state vector."""
    k = bank.n_levels
    if not 1 <= r_h <= k:
        raise SelectError(f"historical level {r_h} outside 1..{k}")
    distances = [min_distance_to_bank(h, bank.centroids[i]) for i in range(k)]
    chosen = None
    for level in range(1, k + 1):
        if distances[level - 1] <= bank.thresholds[level - 1]:
            chosen = level
            break
    fallback = chosen is None
    if fallback:
        chosen = 1 + int(np.argmin(distances))
    return SelectionTrace(
        distances=distances,
        chosen_pre_cap=chosen,
        historical_level=r_h,
        final_level=min(chosen, r_h),
        fallback_used=fallback,
    )


def select_level(state, bank: CentroidBank, policy: PolicyParams, r_h: int) -> SelectionTrace:
    state = np.asarray(state, dtype=float).reshape(1, -1)
    h = encode(policy.encoder, state)[0]
    if h.shape[0] != bank.centroids[0].shape[1]:
        raise ShapeError(
            f"encoded dimension {h.shape[0]} != bank dimension {bank.centroids[0].shape[1]}"
        )
    return select_from_encoded(h, bank, r_h)


def recommend(state, bank: CentroidBank, policy: PolicyParams, r_h: int):
    """Route the state, then run the selected level's head on it.

    Continuous heads return (action_vector, trace); discrete heads return
    ((probabilities, argmax_item), trace), ties going to the lowest item.
    """
    state = np.asarray(state, dtype=float).reshape(1, -1)
    trace = select_level(state, bank, policy, r_h)
    h = encode(policy.encoder, state)
    head = policy.predictors[trace.final_level - 1]
    if head.kind == CONTINUOUS:
        action = predict_continuous(head, h)[0]
        return action, trace
    probs = predict_discrete(head, h)[0]
    return (probs, int(np.argmax(probs))), trace


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def bank_to_dict(bank: CentroidBank) -> dict:
    return {
        "format": BANK_FORMAT,
        "levels": [
            {"centroids": c.tolist(), "threshold": float(t)}
            for c, t in zip(bank.centroids, bank.thresholds)
        ],
    }


def bank_from_dict(doc: dict) -> CentroidBank:
    if doc.get("format") != BANK_FORMAT:
        raise ValueError(f"unrecognized bank format {doc.get('format')!r}")
    return CentroidBank(
        centroids=[np.array(level["centroids"], dtype=float) for level in doc["levels"]],
        thresholds=[float(level["threshold"]) for level in doc["levels"]],
    )


def save_bank(bank: CentroidBank, path) -> None:
    write_json(path, bank_to_dict(bank))


def load_bank(path) -> CentroidBank:
    return bank_from_dict(read_json(path))


# ---------------------------------------------------------------------------
# Stateful recommender wrapping the routing rule for simulator rollouts
# ---------------------------------------------------------------------------


class AdaptiveRecommender:
    """Serves actions via adaptive level selection, tracking retention history.

    The historical level starts at the weakest cap (K) for every user and is
    re-estimated from observed return gaps (or session counts in active-days
    mode) against the stratification boundaries; users failing the expert
    threshold keep the weakest cap.
    """

    def __init__(
        self,
        policy: PolicyParams,
        bank: CentroidBank,
        boundaries: list[float],
        expert_threshold: float,
        mode: str = RETURN_TIME,
        record_traces: bool = False,
    ):
        if mode not in (RETURN_TIME, ACTIVE_DAYS):
            raise SelectError(f"unknown retention mode {mode!r}")
        self.policy = policy
        self.bank = bank
        self.boundaries = list(boundaries)
        self.expert_threshold = expert_threshold
        self.mode = mode
        self.record_traces = record_traces
        self._gaps: dict[str, list[float]] = {}
        self._sessions: dict[str, int] = {}
        self.trace_rows: list[dict] = []

    def begin_user(self, user_id: str) -> None:
        self._gaps.setdefault(user_id, [])
        self._sessions[user_id] = self._sessions.get(user_id, 0) + 1

    def observe_return(self, user_id: str, gap: float) -> None:
        self._gaps.setdefault(user_id, []).append(gap)

    def historical_level(self, user_id: str) -> int:
        k = self.bank.n_levels
        if self.mode == RETURN_TIME:
            gaps = self._gaps.get(user_id, [])
            if not gaps:
                return k
            mean_gap = sum(gaps) / len(gaps)
            if mean_gap > self.expert_threshold:
                return k
            return min(level_for_score(-mean_gap, self.boundaries), k)
        sessions = self._sessions.get(user_id, 0)
        if sessions < self.expert_threshold:
            return k
        return min(level_for_score(float(sessions), self.boundaries), k)

    def act(self, user_id: str, state):
        r_h = self.historical_level(user_id)
        result, trace = recommend(state, self.bank, self.policy, r_h)
        if self.policy.head_kind == CONTINUOUS:
            action = result
            logged = [float(x) for x in action]
        else:
            _, item = result
            action = item
            logged = item
        if self.record_traces:
            self.trace_rows.append(
                {
                    "user_id": user_id,
                    "d": [float(d) for d in trace.distances],
                    "pre_cap": trace.chosen_pre_cap,
                    "r_h": trace.historical_level,
                    "k_star": trace.final_level,
                    "fallback": trace.fallback_used,
                    "action": logged,
                }
            )
        return action
