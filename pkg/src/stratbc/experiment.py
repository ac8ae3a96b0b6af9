"""End-to-end experiment orchestration shared by the CLI commands.

Everything here is a pure function of (config, seeds, input artifacts):
data generation, the stratify-train-cluster pipeline, paired evaluations,
the ablation suite, and the regularization-weight sweep.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

from . import select as sel
from . import simenv, stratify, train
from .config import ExperimentConfig
from .policy import PolicyParams
from .simenv import EvalReport
from .stratify import LeveledDataset, Trajectory

VARIANTS = ("full", "no_multilevel", "no_aer")


@dataclass
class RunArtifacts:
    dataset: LeveledDataset
    policy: PolicyParams
    log_rows: list[train.EpochRow]
    bank: sel.CentroidBank


def apply_variant(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """Ablation variants differ from the full system in exactly one knob."""
    if variant == "full":
        return cfg
    if variant == "no_multilevel":
        return replace(cfg, stratify=replace(cfg.stratify, k_levels=1))
    if variant == "no_aer":
        return replace(cfg, train=replace(cfg.train, lam=0.0))
    raise ValueError(f"unknown ablation variant {variant!r}")


def build_dataset(cfg: ExperimentConfig, trajectories: list[Trajectory]) -> LeveledDataset:
    experts = stratify.select_experts(
        trajectories, cfg.stratify.expert_threshold, cfg.stratify.mode
    )
    return stratify.stratify(experts, cfg.stratify.k_levels, cfg.stratify.mode)


def train_from_trajectories(
    cfg: ExperimentConfig, trajectories: list[Trajectory], on_epoch=None
) -> RunArtifacts:
    """Stratify, fit the policy, and build the routing centroids."""
    dataset = build_dataset(cfg, trajectories)
    policy, rows = train.fit(dataset, cfg.train, on_epoch=on_epoch)
    bank = sel.build_centroids(
        policy,
        [level.states for level in dataset.levels],
        min(cfg.select.clusters_per_level, min(level.size for level in dataset.levels)),
        cfg.train.seed,
    )
    return RunArtifacts(dataset=dataset, policy=policy, log_rows=rows, bank=bank)


def adaptive_recommender(
    cfg: ExperimentConfig, artifacts: RunArtifacts, record_traces: bool = False
) -> sel.AdaptiveRecommender:
    return sel.AdaptiveRecommender(
        policy=artifacts.policy,
        bank=artifacts.bank,
        boundaries=artifacts.dataset.boundaries,
        expert_threshold=cfg.stratify.expert_threshold,
        mode=cfg.stratify.mode,
        record_traces=record_traces,
    )


def evaluate_adaptive(
    cfg: ExperimentConfig, artifacts: RunArtifacts, record_traces: bool = False
) -> tuple[EvalReport, list[dict]]:
    rec = adaptive_recommender(cfg, artifacts, record_traces=record_traces)
    report = simenv.evaluate(rec, cfg.sim, cfg.eval.episodes)
    return report, rec.trace_rows


def evaluate_fixed_levels(cfg: ExperimentConfig, artifacts: RunArtifacts) -> list[EvalReport]:
    reports = []
    for level in range(1, artifacts.policy.n_levels + 1):
        rec = simenv.FixedLevelRecommender(artifacts.policy, level)
        reports.append(simenv.evaluate(rec, cfg.sim, cfg.eval.episodes))
    return reports


def run_single(
    cfg: ExperimentConfig, seed: int, trajectories: list[Trajectory] | None = None
) -> dict:
    """One full train-and-evaluate run; returns the headline metrics."""
    cfg = cfg.with_base_seed(seed)
    if trajectories is None:
        trajectories = simenv.generate_dataset(cfg.sim)
    artifacts = train_from_trajectories(cfg, trajectories)
    report, _ = evaluate_adaptive(cfg, artifacts)
    return {
        "seed": seed,
        "return_time": report.return_time,
        "click_rate": report.click_rate,
        "long_view_rate": report.long_view_rate,
        "like_rate": report.like_rate,
    }


def _mean(rows: list[dict], key: str) -> float:
    return sum(r[key] for r in rows) / len(rows)


METRIC_KEYS = ("return_time", "click_rate", "long_view_rate", "like_rate")


def run_ablation(
    cfg: ExperimentConfig, base_seed: int, on_result=None
) -> tuple[list[dict], list[dict]]:
    """Paired-seed ablation suite over the three variants.

    Data generation is shared per seed (the generative process does not
    depend on the ablated knobs), so variant comparisons are exactly paired.
    Returns (per-variant mean rows with deltas vs full, per-seed rows);
    ``on_result`` sees each per-seed row as it completes, so callers can
    preserve partial results if a later variant fails.
    """
    seeds = [base_seed + i for i in range(cfg.ablate.n_seeds)]
    per_seed: list[dict] = []
    by_variant: dict[str, list[dict]] = {v: [] for v in VARIANTS}
    for seed in seeds:
        trajectories = simenv.generate_dataset(replace(cfg.sim, seed=seed))
        for variant in VARIANTS:
            metrics = run_single(apply_variant(cfg, variant), seed, trajectories)
            row = {"variant": variant, **metrics}
            per_seed.append(row)
            by_variant[variant].append(row)
            if on_result is not None:
                on_result(row)

    mean_rows = []
    full_means = {key: _mean(by_variant["full"], key) for key in METRIC_KEYS}
    for variant in VARIANTS:
        row = {"variant": variant, "n_seeds": len(seeds)}
        for key in METRIC_KEYS:
            row[key] = _mean(by_variant[variant], key)
        for key in ("return_time", "click_rate", "long_view_rate"):
            row[f"d_{key}_vs_full"] = row[key] - full_means[key]
        mean_rows.append(row)
    return mean_rows, per_seed


def run_lambda_sweep(
    cfg: ExperimentConfig, grid, base_seed: int
) -> tuple[list[dict], list[dict]]:
    """One full train-and-evaluate per grid point, paired across seeds."""
    seeds = [base_seed + i for i in range(cfg.sweep.n_seeds)]
    per_seed: list[dict] = []
    mean_rows: list[dict] = []
    cache: dict[int, list[Trajectory]] = {}
    for lam in grid:
        lam_cfg = replace(cfg, train=replace(cfg.train, lam=float(lam)))
        rows = []
        for seed in seeds:
            if seed not in cache:
                cache[seed] = simenv.generate_dataset(replace(cfg.sim, seed=seed))
            metrics = run_single(lam_cfg, seed, cache[seed])
            row = {"lambda": float(lam), **metrics}
            rows.append(row)
            per_seed.append(row)
        mean_row = {"lambda": float(lam), "n_seeds": len(seeds)}
        for key in METRIC_KEYS:
            mean_row[key] = _mean(rows, key)
        mean_rows.append(mean_row)
    return mean_rows, per_seed


# ---------------------------------------------------------------------------
# CSV interchange (repr-formatted floats so reruns are byte-identical)
# ---------------------------------------------------------------------------


def write_csv(path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(
                [repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns]
            )


def read_csv(path) -> list[dict]:
    """Read back a CSV written by write_csv, restoring numeric types."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            parsed = {}
            for key, value in rec.items():
                try:
                    parsed[key] = int(value)
                except ValueError:
                    try:
                        parsed[key] = float(value)
                    except ValueError:
                        parsed[key] = value
            rows.append(parsed)
    return rows


ABLATION_COLUMNS = [
    "variant",
    "n_seeds",
    "return_time",
    "click_rate",
    "long_view_rate",
    "like_rate",
    "d_return_time_vs_full",
    "d_click_rate_vs_full",
    "d_long_view_rate_vs_full",
]

ABLATION_SEED_COLUMNS = ["variant", "seed"] + list(METRIC_KEYS)

SWEEP_COLUMNS = ["lambda", "n_seeds"] + list(METRIC_KEYS)

SWEEP_SEED_COLUMNS = ["lambda", "seed"] + list(METRIC_KEYS)

EVAL_SUITE_COLUMNS = ["policy"] + simenv.EVAL_METRIC_FIELDS


def eval_suite_rows(
    adaptive: EvalReport, fixed: list[EvalReport]
) -> list[dict]:
    rows = [{"policy": "adaptive", **simenv.eval_report_to_dict(adaptive, False)}]
    for level, report in enumerate(fixed, start=1):
        rows.append({"policy": f"level_{level}", **simenv.eval_report_to_dict(report, False)})
    return rows
