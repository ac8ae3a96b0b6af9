"""Retention scoring, expert selection, and multi-level stratification.

Expert users are ranked by a retention score (active days within the
observation window, or negated mean return time) and split at score quantiles
into K levels, level 1 being the highest-retention stratum. Each level's
state-action pairs form the behavior cloning dataset for that level's head.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .jsonio import dumps_jsonl_row, jround, read_json, write_json
from .policy import CONTINUOUS, DISCRETE

ACTIVE_DAYS = "active_days"
RETURN_TIME = "return_time"
MODES = (ACTIVE_DAYS, RETURN_TIME)


class TrajectoryError(ValueError):
    """A trajectory violates its structural invariants."""


class StratifyError(ValueError):
    """Stratification preconditions not met (e.g. fewer experts than levels)."""


@dataclass
class Trajectory:
    """One user's ordered interaction record plus retention outcomes."""

    user_id: str
    states: np.ndarray
    actions: np.ndarray
    signals: list[dict[str, float]]
    return_times: list[float]
    active_days: int

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[0] == 0:
            raise TrajectoryError(f"user {self.user_id}: steps must be a nonempty 2-D state block")
        self.actions = np.asarray(self.actions)
        if self.actions.shape[0] != self.states.shape[0]:
            raise TrajectoryError(f"user {self.user_id}: one action per state required")
        if self.actions.ndim == 2:
            self.actions = self.actions.astype(float)
        elif self.actions.ndim == 1:
            self.actions = self.actions.astype(int)
        else:
            raise TrajectoryError(f"user {self.user_id}: actions must be vectors or indices")
        if len(self.signals) != self.states.shape[0]:
            raise TrajectoryError(f"user {self.user_id}: one signal map per step required")
        if any(g < 0 for g in self.return_times):
            raise TrajectoryError(f"user {self.user_id}: negative return gap")
        if self.active_days < 0:
            raise TrajectoryError(f"user {self.user_id}: negative active day count")

    @property
    def action_kind(self) -> str:
        return CONTINUOUS if self.actions.ndim == 2 else DISCRETE


def retention_score(traj: Trajectory, mode: str) -> float:
    """Higher is better in both modes; return-time scores are negated means."""
    if mode == ACTIVE_DAYS:
        return float(traj.active_days)
    if mode == RETURN_TIME:
        if not traj.return_times:
            raise StratifyError(
                f"user {traj.user_id}: no return gaps recorded, return-time score undefined"
            )
        return -float(np.mean(traj.return_times))
    raise StratifyError(f"unknown retention mode {mode!r}")


def is_expert(traj: Trajectory, threshold: float, mode: str) -> bool:
    if mode == RETURN_TIME:
        # Users with no recorded gaps cannot demonstrate retention.
        if not traj.return_times:
            return False
        return float(np.mean(traj.return_times)) <= threshold
    if mode == ACTIVE_DAYS:
        return traj.active_days >= threshold
    raise StratifyError(f"unknown retention mode {mode!r}")


def select_experts(trajectories: list[Trajectory], threshold: float, mode: str) -> list[Trajectory]:
    return [t for t in trajectories if is_expert(t, threshold, mode)]


@dataclass
class LevelData:
    states: np.ndarray
    actions: np.ndarray

    @property
    def size(self) -> int:
        return self.states.shape[0]


@dataclass
class LeveledDataset:
    """K per-level state-action datasets; index 0 holds level 1 (best retention)."""

    levels: list[LevelData]
    level_of_user: dict[str, int]
    boundaries: list[float]
    mode: str
    scores: dict[str, float] = field(default_factory=dict)

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def quantile_boundaries(scores: list[float], k: int) -> list[float]:
    """Score cuts at the 1/k..(k-1)/k quantiles, taken over the sorted scores."""
    ordered = sorted(scores, reverse=True)
    n = len(ordered)
    return [ordered[math.ceil(n * j / k) - 1] for j in range(1, k)]


def level_for_score(score: float, boundaries: list[float]) -> int:
    """1-based level; scores sitting exactly on a cut go to the better level."""
    return 1 + sum(score < b for b in boundaries)


def stratify(experts: list[Trajectory], k: int, mode: str) -> LeveledDataset:
    """Split experts into k retention quantiles and pool their pairs per level.

    A user's whole trajectory lands in exactly one level, so the level
    datasets partition the expert pair set. Pair order within a level is
    canonical (descending score, then user id) and therefore independent of
    the input ordering.
    """
    if k < 1:
        raise StratifyError(f"level count {k} must be at least 1")
    if len(experts) < k:
        raise StratifyError(f"cannot stratify {len(experts)} experts into {k} levels")

    scores = {t.user_id: retention_score(t, mode) for t in experts}
    if len(scores) != len(experts):
        raise StratifyError("duplicate user ids among experts")
    boundaries = quantile_boundaries(list(scores.values()), k)

    level_of_user = {uid: level_for_score(s, boundaries) for uid, s in scores.items()}
    by_level: list[list[Trajectory]] = [[] for _ in range(k)]
    for traj in sorted(experts, key=lambda t: (-scores[t.user_id], t.user_id)):
        by_level[level_of_user[traj.user_id] - 1].append(traj)

    levels = []
    for members in by_level:
        if members:
            states = np.concatenate([t.states for t in members], axis=0)
            actions = np.concatenate([t.actions for t in members], axis=0)
        else:
            states = np.zeros((0, experts[0].states.shape[1]))
            actions = (
                np.zeros((0, experts[0].actions.shape[1]))
                if experts[0].action_kind == CONTINUOUS
                else np.zeros(0, dtype=int)
            )
        levels.append(LevelData(states=states, actions=actions))
    return LeveledDataset(
        levels=levels,
        level_of_user=level_of_user,
        boundaries=boundaries,
        mode=mode,
        scores=scores,
    )


# ---------------------------------------------------------------------------
# Trajectory JSONL interchange
# ---------------------------------------------------------------------------


def trajectory_to_json(traj: Trajectory) -> dict:
    steps = []
    for i in range(traj.states.shape[0]):
        action = (
            [jround(x) for x in traj.actions[i]]
            if traj.action_kind == CONTINUOUS
            else int(traj.actions[i])
        )
        steps.append(
            {
                "state": [jround(x) for x in traj.states[i]],
                "action": action,
                "signals": {name: jround(v) for name, v in sorted(traj.signals[i].items())},
            }
        )
    return {
        "user_id": traj.user_id,
        "steps": steps,
        "return_times": [jround(g) for g in traj.return_times],
        "active_days": int(traj.active_days),
    }


def trajectory_from_json(doc: dict) -> Trajectory:
    steps = doc["steps"]
    states = np.array([s["state"] for s in steps], dtype=float)
    first_action = steps[0]["action"]
    if isinstance(first_action, list):
        actions = np.array([s["action"] for s in steps], dtype=float)
    else:
        actions = np.array([s["action"] for s in steps], dtype=int)
    return Trajectory(
        user_id=doc["user_id"],
        states=states,
        actions=actions,
        signals=[dict(s["signals"]) for s in steps],
        return_times=[float(g) for g in doc["return_times"]],
        active_days=int(doc["active_days"]),
    )


def write_trajectories(path, trajectories: list[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(dumps_jsonl_row(trajectory_to_json(traj)) + "\n")


def read_trajectories(path) -> list[Trajectory]:
    trajectories = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                trajectories.append(trajectory_from_json(json.loads(line)))
    return trajectories


# ---------------------------------------------------------------------------
# Leveled dataset manifest (per-level pair files plus one JSON index)
# ---------------------------------------------------------------------------


def write_leveled_dataset(ds: LeveledDataset, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for idx, level in enumerate(ds.levels, start=1):
        name = f"level_{idx}.jsonl"
        files.append(name)
        with open(out_dir / name, "w", encoding="utf-8") as fh:
            for i in range(level.size):
                action = (
                    [jround(x) for x in level.actions[i]]
                    if level.actions.ndim == 2
                    else int(level.actions[i])
                )
                row = {"state": [jround(x) for x in level.states[i]], "action": action}
                fh.write(dumps_jsonl_row(row) + "\n")
    manifest = {
        "format": "stratbc-leveled-v1",
        "mode": ds.mode,
        "n_levels": ds.n_levels,
        "boundaries": [jround(b) for b in ds.boundaries],
        "files": files,
        "pair_counts": [level.size for level in ds.levels],
        "level_of_user": {uid: lvl for uid, lvl in sorted(ds.level_of_user.items())},
        "scores": {uid: jround(s) for uid, s in sorted(ds.scores.items())},
    }
    manifest_path = out_dir / "manifest.json"
    write_json(manifest_path, manifest)
    return manifest_path


def read_leveled_dataset(manifest_path) -> LeveledDataset:
    manifest_path = Path(manifest_path)
    doc = read_json(manifest_path)
    if doc.get("format") != "stratbc-leveled-v1":
        raise ValueError(f"unrecognized manifest format {doc.get('format')!r}")
    levels = []
    for name in doc["files"]:
        states, actions = [], []
        with open(manifest_path.parent / name, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                states.append(row["state"])
                actions.append(row["action"])
        if states:
            state_arr = np.array(states, dtype=float)
            first = actions[0]
            action_arr = (
                np.array(actions, dtype=float)
                if isinstance(first, list)
                else np.array(actions, dtype=int)
            )
        else:
            state_arr = np.zeros((0, 0))
            action_arr = np.zeros(0, dtype=int)
        levels.append(LevelData(states=state_arr, actions=action_arr))
    return LeveledDataset(
        levels=levels,
        level_of_user={uid: int(lvl) for uid, lvl in doc["level_of_user"].items()},
        boundaries=[float(b) for b in doc["boundaries"]],
        mode=doc["mode"],
        scores={uid: float(s) for uid, s in doc.get("scores", {}).items()},
    )
