"""Deterministic synthetic retention environment.

A population of users with latent unit-norm preference vectors interacts in
sessions. Per recommendation, click / long-view / like feedback is drawn from
logistic probabilities of the action-preference match, satisfaction
accumulates from feedback plus a saturating novelty bonus, a leave module
ends sessions as they grow long or satisfaction stalls, and a return module
draws the next-visit gap from a geometric distribution whose mean shrinks as
session satisfaction rises.

Ground-truth "expert" archetypes differ in how tightly their actions track
the user preference: archetype 1 is most aligned (and least varied), higher
archetypes are noisier (and more varied), so multi-level expert structure
exists in generated data and diversity causally shortens return gaps through
the novelty bonus.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace

import numpy as np

from .policy import CONTINUOUS, DISCRETE
from .stratify import Trajectory


class SimError(ValueError):
    """Simulator configuration or usage violates a contract."""


class InactiveUserError(RuntimeError):
    """step() called for a user who is not currently in a session."""


@dataclass
class SimConfig:
    n_users: int = 2000
    action_kind: str = CONTINUOUS
    action_dim: int = 8
    n_items: int = 16
    k_true: int = 3
    session_len_max: int = 10
    noise_scale: float = 0.25
    horizon_days: int = 30
    seed: int = 0
    # Feedback calibration: P(signal) = logistic(gain * engagement + bias),
    # engagement being the action-preference dot product plus noise.
    click_gain: float = 3.0
    click_bias: float = 0.0
    long_view_gain: float = 2.5
    long_view_bias: float = -0.4
    like_gain: float = 2.0
    like_bias: float = -1.0
    # Satisfaction weights; the novelty bonus saturates at novelty_saturation.
    w_click: float = 0.45
    w_long_view: float = 0.27
    w_like: float = 0.13
    w_novelty: float = 0.15
    novelty_saturation: float = 0.08
    # Leave module: P(leave) = logistic(steepness * (steps - midpoint) - pull * gain).
    leave_steepness: float = 0.35
    leave_midpoint: float = 8.0
    leave_sat_pull: float = 2.0
    # Return module: mean gap interpolates ceiling -> floor as satisfaction rises.
    gap_floor: float = 1.0
    gap_ceiling: float = 7.0
    # Ground-truth expert concentration per archetype, best archetype first.
    expert_align: tuple = (6.0, 1.7, 0.8)

    @property
    def out_dim(self) -> int:
        return self.action_dim if self.action_kind == CONTINUOUS else self.n_items

    @property
    def state_dim(self) -> int:
        return 2 * self.out_dim

    def validate(self) -> None:
        counts = {
            "n_users": self.n_users,
            "action_dim": self.action_dim,
            "n_items": self.n_items,
            "k_true": self.k_true,
            "session_len_max": self.session_len_max,
            "horizon_days": self.horizon_days,
        }
        for name, value in counts.items():
            if value < 1:
                raise SimError(f"{name} must be at least 1, got {value}")
        if self.action_kind not in (CONTINUOUS, DISCRETE):
            raise SimError(f"unknown action kind {self.action_kind!r}")
        if not math.isfinite(self.noise_scale) or self.noise_scale < 0:
            raise SimError(f"noise_scale must be finite and nonnegative, got {self.noise_scale}")
        if len(self.expert_align) != self.k_true:
            raise SimError(
                f"expert_align has {len(self.expert_align)} entries, expected k_true={self.k_true}"
            )
        if any(a <= 0 for a in self.expert_align):
            raise SimError("expert_align entries must be positive")
        if any(
            self.expert_align[i] <= self.expert_align[i + 1]
            for i in range(self.k_true - 1)
        ):
            raise SimError("expert_align must be strictly decreasing (best archetype first)")
        if not 1.0 <= self.gap_floor <= self.gap_ceiling:
            raise SimError("need 1 <= gap_floor <= gap_ceiling")
        if self.novelty_saturation <= 0:
            raise SimError("novelty_saturation must be positive")

    @property
    def satisfaction_weight_total(self) -> float:
        return self.w_click + self.w_long_view + self.w_like + self.w_novelty


def logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass
class UserState:
    user_id: str
    archetype: int
    preference: list[float]
    rng: random.Random
    day: int = 0
    in_session: bool = True
    active_days: int = 1
    session_steps: int = 0
    session_buffer: list = field(default_factory=list)
    session_dirs: list = field(default_factory=list)
    session_gains: list[float] = field(default_factory=list)
    satisfaction: float = 0.0
    return_times: list[float] = field(default_factory=list)


@dataclass
class GroundTruthPolicy:
    """Archetype behavior: actions concentrated around the user preference."""

    level: int
    concentration: float
    kind: str

    def sample(self, preference: list[float], rng: random.Random):
        if self.kind == CONTINUOUS:
            raw = [
                self.concentration * p + rng.gauss(0.0, 1.0) for p in preference
            ]
            norm = math.sqrt(sum(x * x for x in raw))
            if norm < 1e-12:
                return [1.0] + [0.0] * (len(preference) - 1)
            return [x / norm for x in raw]
        weights = [math.exp(self.concentration * p) for p in preference]
        total = sum(weights)
        u = rng.random() * total
        acc = 0.0
        for idx, w in enumerate(weights):
            acc += w
            if u < acc:
                return idx
        return len(weights) - 1


@dataclass
class Environment:
    cfg: SimConfig
    users: dict[str, UserState]
    gt_policies: list[GroundTruthPolicy]
    user_order: list[str]


def _user_rng(cfg: SimConfig, stream: str, index: int) -> random.Random:
    return random.Random(f"{cfg.seed}:{stream}:{index}")


def _unit_preference(rng: random.Random, dim: int) -> list[float]:
    while True:
        raw = [rng.gauss(0.0, 1.0) for _ in range(dim)]
        norm = math.sqrt(sum(x * x for x in raw))
        if norm > 1e-12:
            return [x / norm for x in raw]


def gen_population(cfg: SimConfig, stream: str = "gen") -> Environment:
    """Seeded users (archetypes round-robin) plus their archetype policies."""
    cfg.validate()
    users: dict[str, UserState] = {}
    order = []
    for i in range(cfg.n_users):
        rng = _user_rng(cfg, stream, i)
        uid = f"u{i:05d}"
        users[uid] = UserState(
            user_id=uid,
            archetype=i % cfg.k_true,
            preference=_unit_preference(rng, cfg.out_dim),
            rng=rng,
        )
        order.append(uid)
    policies = [
        GroundTruthPolicy(level=k + 1, concentration=cfg.expert_align[k], kind=cfg.action_kind)
        for k in range(cfg.k_true)
    ]
    return Environment(cfg=cfg, users=users, gt_policies=policies, user_order=order)


def observe_user(cfg: SimConfig, user: UserState) -> list[float]:
    """Observed state: preference concatenated with the session action summary."""
    dim = cfg.out_dim
    summary = [0.0] * dim
    if cfg.action_kind == CONTINUOUS:
        if user.session_buffer:
            inv = 1.0 / len(user.session_buffer)
            for action in user.session_buffer:
                for j in range(dim):
                    summary[j] += action[j] * inv
    else:
        if user.session_buffer:
            inv = 1.0 / len(user.session_buffer)
            for item in user.session_buffer:
                summary[item] += inv
    return list(user.preference) + summary


def feedback_probabilities(cfg: SimConfig, engagement: float) -> tuple[float, float, float]:
    """Click, long-view, and like probabilities at a given engagement value."""
    return (
        logistic(cfg.click_gain * engagement + cfg.click_bias),
        logistic(cfg.long_view_gain * engagement + cfg.long_view_bias),
        logistic(cfg.like_gain * engagement + cfg.like_bias),
    )


def action_novelty_continuous(session_dirs: list, direction: list[float] | None) -> float:
    """1 minus the largest cosine to the session's earlier action directions."""
    if direction is None:
        return 0.0
    if not session_dirs:
        return 1.0
    best = max(sum(a * b for a, b in zip(d, direction)) for d in session_dirs)
    return min(1.0, max(0.0, 1.0 - best))


def action_novelty_discrete(session_items: list, item: int) -> float:
    if not session_items:
        return 1.0
    return 1.0 - session_items.count(item) / len(session_items)


def leave_probability(cfg: SimConfig, steps_taken: int, sat_gain: float) -> float:
    return logistic(
        cfg.leave_steepness * (steps_taken - cfg.leave_midpoint)
        - cfg.leave_sat_pull * sat_gain
    )


@dataclass
class StepFeedback:
    click: int
    long_view: int
    like: int
    left_session: bool


def step(env: Environment, user_id: str, action) -> StepFeedback:
    """One recommendation shown to an in-session user.

    Draws feedback, updates the satisfaction accumulator with the weighted
    feedback plus the saturating novelty bonus, and decides whether the
    session ends (probability rising with session length, falling with the
    step's satisfaction gain; hard stop at session_len_max).
    """
    cfg = env.cfg
    user = env.users[user_id]
    if not user.in_session:
        raise InactiveUserError(f"user {user_id} is not in a session")

    if cfg.action_kind == CONTINUOUS:
        action = [float(x) for x in action]
        if len(action) != cfg.action_dim:
            raise SimError(f"action has {len(action)} dims, expected {cfg.action_dim}")
        norm = math.sqrt(sum(a * a for a in action))
        # Served items live on the unit ball: actions outside are projected
        # back, so inflating the norm cannot inflate engagement.
        if norm > 1.0:
            action = [a / norm for a in action]
            direction = list(action)
        elif norm > 1e-12:
            direction = [a / norm for a in action]
        else:
            direction = None
        dot = sum(a * p for a, p in zip(action, user.preference))
        novelty = action_novelty_continuous(user.session_dirs, direction)
    else:
        action = int(action)
        if not 0 <= action < cfg.n_items:
            raise SimError(f"item {action} outside catalogue 0..{cfg.n_items - 1}")
        dot = user.preference[action]
        novelty = action_novelty_discrete(user.session_buffer, action)

    eps = user.rng.gauss(0.0, cfg.noise_scale) if cfg.noise_scale > 0 else 0.0
    p_click, p_lv, p_like = feedback_probabilities(cfg, dot + eps)
    click = 1 if user.rng.random() < p_click else 0
    long_view = 1 if user.rng.random() < p_lv else 0
    like = 1 if user.rng.random() < p_like else 0

    bonus = min(novelty, cfg.novelty_saturation) / cfg.novelty_saturation
    gain = (
        cfg.w_click * click
        + cfg.w_long_view * long_view
        + cfg.w_like * like
        + cfg.w_novelty * bonus
    ) / cfg.satisfaction_weight_total
    user.satisfaction += gain
    user.session_gains.append(gain)
    if cfg.action_kind == CONTINUOUS:
        user.session_buffer.append(action)
        if direction is not None:
            user.session_dirs.append(direction)
    else:
        user.session_buffer.append(action)
    user.session_steps += 1

    if user.session_steps >= cfg.session_len_max:
        left = True
    else:
        left = user.rng.random() < leave_probability(cfg, user.session_steps, gain)
    if left:
        user.in_session = False
    return StepFeedback(click=click, long_view=long_view, like=like, left_session=left)


def mean_gap_for_satisfaction(cfg: SimConfig, satisfaction: float) -> float:
    """Target mean of the return-gap distribution; monotone nonincreasing."""
    s = min(1.0, max(0.0, satisfaction))
    return cfg.gap_ceiling - (cfg.gap_ceiling - cfg.gap_floor) * s


def sample_return_gap(cfg: SimConfig, rng: random.Random, satisfaction: float) -> int:
    """Geometric draw (support 1, 2, ...) with the satisfaction-driven mean."""
    mean = mean_gap_for_satisfaction(cfg, satisfaction)
    p = 1.0 / mean
    if p >= 1.0:
        return 1
    u = rng.random()
    return max(1, int(math.ceil(math.log1p(-u) / math.log1p(-p))))


def end_of_session(env: Environment, user_id: str) -> float:
    """Draw the next return gap for a user whose session just ended.

    The gap is clamped to [1, horizon remaining]; if the user returns before
    the horizon a fresh session starts, otherwise the user stays inactive.
    """
    cfg = env.cfg
    user = env.users[user_id]
    if user.in_session:
        raise SimError(f"user {user_id} is still in a session")
    if not user.session_gains:
        raise SimError(f"user {user_id} has no session to close out")

    session_satisfaction = sum(user.session_gains) / len(user.session_gains)
    raw = sample_return_gap(cfg, user.rng, session_satisfaction)
    remaining = cfg.horizon_days - user.day
    gap = float(max(1, min(raw, max(1, remaining))))
    user.return_times.append(gap)

    user.session_buffer = []
    user.session_dirs = []
    user.session_gains = []
    user.session_steps = 0
    user.day = min(user.day + int(gap), cfg.horizon_days)
    if user.day < cfg.horizon_days:
        user.in_session = True
        user.active_days += 1
    return gap


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


def _rollout_user(env: Environment, user: UserState, act_fn, on_step=None, on_gap=None):
    while True:
        while user.in_session:
            state = observe_user(env.cfg, user)
            action = act_fn(user, state)
            fb = step(env, user.user_id, action)
            if on_step is not None:
                on_step(state, action, fb)
        gap = end_of_session(env, user.user_id)
        if on_gap is not None:
            on_gap(gap)
        if not user.in_session:
            return


def generate_dataset(cfg: SimConfig) -> list[Trajectory]:
    """Roll every user under their archetype's ground-truth policy."""
    env = gen_population(cfg, stream="gen")
    trajectories = []
    for uid in env.user_order:
        user = env.users[uid]
        gt = env.gt_policies[user.archetype]
        states, actions, signals = [], [], []

        def record(state, action, fb):
            states.append(state)
            actions.append(action)
            signals.append(
                {"click": float(fb.click), "long_view": float(fb.long_view), "like": float(fb.like)}
            )

        _rollout_user(env, user, lambda u, s: gt.sample(u.preference, u.rng), on_step=record)
        trajectories.append(
            Trajectory(
                user_id=uid,
                states=np.array(states, dtype=float),
                actions=(
                    np.array(actions, dtype=float)
                    if cfg.action_kind == CONTINUOUS
                    else np.array(actions, dtype=int)
                ),
                signals=signals,
                return_times=user.return_times,
                active_days=user.active_days,
            )
        )
    return trajectories


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    return_time: float
    return_time_hw: float
    click_rate: float
    click_hw: float
    long_view_rate: float
    long_view_hw: float
    like_rate: float
    like_hw: float
    n_users: int
    n_gaps: int
    n_steps: int
    per_user: list[dict] = field(default_factory=list)


def _mean_hw(values: list[float]) -> tuple[float, float]:
    n = len(values)
    if n == 0:
        return 0.0, 0.0
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n
    return mean, 1.96 * math.sqrt(var / n)


def evaluate(recommender, cfg: SimConfig, episodes: int, stream: str = "eval") -> EvalReport:
    """Roll fresh seeded users with actions supplied by the artifact under test.

    ``recommender`` needs an ``act(user_id, state) -> action`` method; optional
    ``begin_user(user_id)`` (called at each session start) and
    ``observe_return(user_id, gap)`` hooks receive retention history.
    """
    if episodes < 1:
        raise SimError(f"episodes must be at least 1, got {episodes}")
    env = gen_population(replace(cfg, n_users=episodes), stream=stream)
    begin = getattr(recommender, "begin_user", None)
    observe_gap = getattr(recommender, "observe_return", None)

    gaps: list[float] = []
    clicks: list[float] = []
    long_views: list[float] = []
    likes: list[float] = []
    per_user: list[dict] = []
    for uid in env.user_order:
        user = env.users[uid]
        u_gaps: list[float] = []
        u_clicks: list[float] = []
        u_lv: list[float] = []
        u_likes: list[float] = []
        sessions_seen = {"n": 0}

        def act_fn(u: UserState, state):
            if begin is not None and u.active_days != sessions_seen["n"]:
                # New session since the last call; let the recommender know.
                for _ in range(u.active_days - sessions_seen["n"]):
                    begin(u.user_id)
                sessions_seen["n"] = u.active_days
            return recommender.act(u.user_id, np.asarray(state, dtype=float))

        def on_step(state, action, fb):
            u_clicks.append(float(fb.click))
            u_lv.append(float(fb.long_view))
            u_likes.append(float(fb.like))

        def on_gap(gap):
            u_gaps.append(gap)
            if observe_gap is not None:
                observe_gap(uid, gap)

        _rollout_user(env, user, act_fn, on_step=on_step, on_gap=on_gap)
        gaps.extend(u_gaps)
        clicks.extend(u_clicks)
        long_views.extend(u_lv)
        likes.extend(u_likes)
        per_user.append(
            {
                "user_id": uid,
                "archetype": user.archetype + 1,
                "sessions": user.active_days,
                "steps": len(u_clicks),
                "mean_gap": sum(u_gaps) / len(u_gaps) if u_gaps else 0.0,
                "click_rate": sum(u_clicks) / len(u_clicks) if u_clicks else 0.0,
                "long_view_rate": sum(u_lv) / len(u_lv) if u_lv else 0.0,
                "like_rate": sum(u_likes) / len(u_likes) if u_likes else 0.0,
            }
        )

    rt, rt_hw = _mean_hw(gaps)
    cr, cr_hw = _mean_hw(clicks)
    lv, lv_hw = _mean_hw(long_views)
    lk, lk_hw = _mean_hw(likes)
    return EvalReport(
        return_time=rt,
        return_time_hw=rt_hw,
        click_rate=cr,
        click_hw=cr_hw,
        long_view_rate=lv,
        long_view_hw=lv_hw,
        like_rate=lk,
        like_hw=lk_hw,
        n_users=episodes,
        n_gaps=len(gaps),
        n_steps=len(clicks),
        per_user=per_user,
    )


EVAL_METRIC_FIELDS = [
    "return_time",
    "return_time_hw",
    "click_rate",
    "click_hw",
    "long_view_rate",
    "long_view_hw",
    "like_rate",
    "like_hw",
    "n_users",
    "n_gaps",
    "n_steps",
]


def eval_report_to_dict(report: EvalReport, include_per_user: bool = True) -> dict:
    doc = {name: getattr(report, name) for name in EVAL_METRIC_FIELDS}
    if include_per_user:
        doc["per_user"] = report.per_user
    return doc


# ---------------------------------------------------------------------------
# Reference recommenders
# ---------------------------------------------------------------------------


class RandomRecommender:
    """Uniform-random actions: directions on the sphere or catalogue items."""

    def __init__(self, cfg: SimConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = random.Random(f"{seed}:random-recommender")

    def act(self, user_id: str, state):
        if self.cfg.action_kind == CONTINUOUS:
            return _unit_preference(self.rng, self.cfg.action_dim)
        return self.rng.randrange(self.cfg.n_items)


class FixedLevelRecommender:
    """Always serves one level's head, bypassing adaptive selection."""

    def __init__(self, policy, level: int):
        from .policy import encode, predict_continuous, predict_discrete

        self._encode = encode
        self._cont = predict_continuous
        self._disc = predict_discrete
        self.policy = policy
        self.level = level

    def act(self, user_id: str, state):
        h = self._encode(self.policy.encoder, np.asarray(state, dtype=float).reshape(1, -1))
        head = self.policy.predictors[self.level - 1]
        if head.kind == CONTINUOUS:
            return self._cont(head, h)[0]
        return int(np.argmax(self._disc(head, h)[0]))


class GroundTruthRecommender:
    """Serves one archetype's generative policy (preference read off the state)."""

    def __init__(self, gt: GroundTruthPolicy, cfg: SimConfig, seed: int = 0):
        self.gt = gt
        self.cfg = cfg
        self.rng = random.Random(f"{seed}:gt-recommender:{gt.level}")

    def act(self, user_id: str, state):
        pref = [float(x) for x in state[: self.cfg.out_dim]]
        return self.gt.sample(pref, self.rng)
