"""Command-line harness.

Subcommands: gen-data, train, build-centroids, evaluate, ablate,
sweep-lambda. Every command is a pure function of (config file, seeds, input
artifacts); each output directory receives the resolved config and tool
version alongside the results. Exit codes: 0 success, 2 config error, 3 data
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import select as sel
from . import experiment, simenv, stratify, train
from .config import ConfigError, ExperimentConfig, default_config, load_config, resolved_dict
from .jsonio import dumps_jsonl_row, write_json
from .linalg import DegenerateSubgradientError, NonFiniteError
from .policy import load_checkpoint, save_checkpoint
from .select import SelectError
from .simenv import SimError
from .stratify import StratifyError, TrajectoryError
from .train import TrainingStepError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(RuntimeError):
    """Missing or refused input/output artifacts."""


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stratbc",
        description="Stratified behavior cloning experiments on the synthetic retention environment.",
    )
    parser.add_argument("--version", action="version", version=f"stratbc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="TOML experiment config")
        p.add_argument("--seed", type=int, default=None, help="base seed override")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    p = sub.add_parser("gen-data", help="generate synthetic trajectories")
    common(p)

    p = sub.add_parser("train", help="stratify experts and train the policy")
    common(p)
    p.add_argument("--trajectories", type=Path, default=None)

    p = sub.add_parser("build-centroids", help="build the per-level routing centroids")
    common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--manifest", type=Path, default=None)

    p = sub.add_parser("evaluate", help="evaluate adaptive routing plus each fixed level")
    common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--bank", type=Path, default=None)

    p = sub.add_parser("ablate", help="run the paired-seed ablation suite")
    common(p)

    p = sub.add_parser("sweep-lambda", help="sweep the diversity regularization weight")
    common(p)
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.with_base_seed(args.seed)
    return cfg.validate()


def _prepare_out(args, cfg: ExperimentConfig, targets: list[str]) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in targets:
        if (out / name).exists() and not args.overwrite:
            raise DataError(f"refusing to replace existing {out / name}; pass --overwrite")
    write_json(out / "resolved_config.json", resolved_dict(cfg))
    write_json(
        out / "run_meta.json",
        {
            "tool": "stratbc",
            "version": __version__,
            "command": args.command,
            "base_seed": cfg.sim.seed,
        },
    )
    return out


def _resolve_input(flag_value, config_value, fallback: Path | None, what: str) -> Path:
    candidates = [flag_value, config_value, fallback]
    for cand in candidates:
        if cand is not None and Path(cand).exists():
            return Path(cand)
    tried = ", ".join(str(c) for c in candidates if c is not None) or "(nothing)"
    raise DataError(f"cannot locate {what}; tried {tried}")


def _score_histogram(trajectories, mode: str, bins: int = 20) -> dict:
    scores = [
        stratify.retention_score(t, mode)
        for t in trajectories
        if mode != stratify.RETURN_TIME or t.return_times
    ]
    counts, edges = np.histogram(np.array(scores, dtype=float), bins=bins)
    return {
        "bin_edges": [float(e) for e in edges],
        "counts": [int(c) for c in counts],
        "n_scored": len(scores),
    }


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = _prepare_out(args, cfg, ["trajectories.jsonl", "summary.json"])
    trajectories = simenv.generate_dataset(cfg.sim)
    stratify.write_trajectories(out / "trajectories.jsonl", trajectories)
    experts = stratify.select_experts(
        trajectories, cfg.stratify.expert_threshold, cfg.stratify.mode
    )
    write_json(
        out / "summary.json",
        {
            "n_users": len(trajectories),
            "n_steps": int(sum(t.states.shape[0] for t in trajectories)),
            "n_experts": len(experts),
            "mode": cfg.stratify.mode,
            "score_histogram": _score_histogram(trajectories, cfg.stratify.mode),
        },
    )
    print(f"wrote {len(trajectories)} trajectories to {out / 'trajectories.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _prepare_out(args, cfg, ["checkpoint.json", "training_log.csv"])
    src = _resolve_input(
        args.trajectories, cfg.paths.trajectories, out / "trajectories.jsonl", "trajectory file"
    )
    trajectories = stratify.read_trajectories(src)
    dataset = experiment.build_dataset(cfg, trajectories)

    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    snap_epochs = sorted({0, cfg.train.epochs // 2, cfg.train.epochs})

    def on_epoch(epoch, policy):
        if epoch in snap_epochs:
            save_checkpoint(policy, snap_dir / f"epoch_{epoch:04d}.json")

    policy, rows = train.fit(dataset, cfg.train, on_epoch=on_epoch)
    save_checkpoint(policy, out / "checkpoint.json")
    train.write_training_log(rows, out / "training_log.csv")
    stratify.write_leveled_dataset(dataset, out / "levels")
    print(
        f"trained {dataset.n_levels}-level policy on "
        f"{sum(l.size for l in dataset.levels)} expert pairs; checkpoint at "
        f"{out / 'checkpoint.json'}"
    )
    return EXIT_OK


def cmd_build_centroids(args) -> int:
    cfg = _load(args)
    out = _prepare_out(args, cfg, ["centroid_bank.json"])
    manifest = _resolve_input(
        args.manifest, cfg.paths.manifest, out / "levels" / "manifest.json", "leveled dataset manifest"
    )
    checkpoint = _resolve_input(
        args.checkpoint, cfg.paths.checkpoint, out / "checkpoint.json", "policy checkpoint"
    )
    dataset = stratify.read_leveled_dataset(manifest)
    policy = load_checkpoint(checkpoint)
    clusters = min(cfg.select.clusters_per_level, min(l.size for l in dataset.levels))
    bank = sel.build_centroids(
        policy, [l.states for l in dataset.levels], clusters, cfg.train.seed
    )
    sel.save_bank(bank, out / "centroid_bank.json")
    print(f"built {bank.n_levels}-level centroid bank at {out / 'centroid_bank.json'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    out = _prepare_out(
        args, cfg, ["eval_report.json", "eval_report.csv", "recommendations.jsonl"]
    )
    checkpoint = _resolve_input(
        args.checkpoint, cfg.paths.checkpoint, out / "checkpoint.json", "policy checkpoint"
    )
    manifest = _resolve_input(
        args.manifest, cfg.paths.manifest, out / "levels" / "manifest.json", "leveled dataset manifest"
    )
    bank_path = _resolve_input(
        args.bank, cfg.paths.bank, out / "centroid_bank.json", "centroid bank"
    )
    policy = load_checkpoint(checkpoint)
    dataset = stratify.read_leveled_dataset(manifest)
    bank = sel.load_bank(bank_path)
    artifacts = experiment.RunArtifacts(
        dataset=dataset, policy=policy, log_rows=[], bank=bank
    )
    adaptive, traces = experiment.evaluate_adaptive(cfg, artifacts, record_traces=True)
    fixed = experiment.evaluate_fixed_levels(cfg, artifacts)

    rows = experiment.eval_suite_rows(adaptive, fixed)
    experiment.write_csv(out / "eval_report.csv", experiment.EVAL_SUITE_COLUMNS, rows)
    write_json(
        out / "eval_report.json",
        {
            "adaptive": simenv.eval_report_to_dict(adaptive),
            "fixed_levels": [simenv.eval_report_to_dict(r) for r in fixed],
        },
    )
    with open(out / "recommendations.jsonl", "w", encoding="utf-8") as fh:
        for row in traces:
            fh.write(dumps_jsonl_row(row) + "\n")
    print(
        f"adaptive return_time {adaptive.return_time:.4f} over {adaptive.n_gaps} gaps; "
        f"reports in {out}"
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = _prepare_out(args, cfg, ["ablation.csv", "ablation_per_seed.csv"])
    partial: list[dict] = []
    try:
        mean_rows, per_seed = experiment.run_ablation(
            cfg, cfg.sim.seed, on_result=partial.append
        )
    except Exception:
        # A variant failed: keep whatever per-seed rows completed, then abort.
        experiment.write_csv(
            out / "ablation_per_seed.csv", experiment.ABLATION_SEED_COLUMNS, partial
        )
        raise
    experiment.write_csv(out / "ablation.csv", experiment.ABLATION_COLUMNS, mean_rows)
    experiment.write_csv(
        out / "ablation_per_seed.csv", experiment.ABLATION_SEED_COLUMNS, per_seed
    )
    for row in mean_rows:
        print(
            f"{row['variant']:>14}: return_time {row['return_time']:.4f} "
            f"click {row['click_rate']:.4f} long_view {row['long_view_rate']:.4f}"
        )
    return EXIT_OK


def cmd_sweep_lambda(args) -> int:
    cfg = _load(args)
    out = _prepare_out(args, cfg, ["lambda_sweep.csv", "lambda_sweep_per_seed.csv"])
    mean_rows, per_seed = experiment.run_lambda_sweep(cfg, cfg.sweep.grid, cfg.sim.seed)
    experiment.write_csv(out / "lambda_sweep.csv", experiment.SWEEP_COLUMNS, mean_rows)
    experiment.write_csv(
        out / "lambda_sweep_per_seed.csv", experiment.SWEEP_SEED_COLUMNS, per_seed
    )
    for row in mean_rows:
        print(f"lambda {row['lambda']:g}: return_time {row['return_time']:.4f}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "build-centroids": cmd_build_centroids,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep-lambda": cmd_sweep_lambda,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, TrajectoryError, StratifyError, SelectError, SimError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingStepError, NonFiniteError, DegenerateSubgradientError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
