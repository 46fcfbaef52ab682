"""Command line entry point: ``fairgrad train|grid|project|study-batches``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .data import SyntheticSpec, load_schema, prepare_dataset, split, synthesize
from .harness import GridSpec, batch_size_study, plot_summary, run_grid, run_training, summarize
from .model import TrainConfig
from .projection import ProjectionSolverConfig, projection_fairret, solve_projection
from .statistics import STATISTIC_NAMES, SampleBatch


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _dataset(config: dict, seed: int, ratio: float = 0.8) -> tuple[SampleBatch, SampleBatch]:
    ds = config.get("dataset", {"synthetic": {}})
    if "synthetic" in ds:
        return split(synthesize(SyntheticSpec(**ds["synthetic"])), ratio, seed)
    return prepare_dataset(load_schema(ds["schema"]), ds["path"], ratio, seed)


def cmd_train(args) -> int:
    config = _read_json(args.config)
    train_cfg = TrainConfig.from_dict(config.get("train", {}))
    train_set, test_set = _dataset(config, train_cfg.seed, config.get("split_ratio", 0.8))
    result = run_training(train_set, test_set, train_cfg)
    summary = {k: v for k, v in result.row().items()}
    summary["history"] = result.history
    text = json.dumps(summary, indent=2, default=float)
    if args.out:
        Path(args.out).write_text(text)
    print(json.dumps({k: v for k, v in summary.items() if k != "history"}, indent=2, default=float))
    return 0 if result.status == "ok" else 1


def cmd_grid(args) -> int:
    spec = GridSpec.from_dict(_read_json(args.config))
    report = run_grid(spec, args.out, workers=args.workers)
    print(f"{report.computed} cells computed, {report.skipped_existing} already present -> {report.path}")
    failed = [r for r in report.rows if r["status"] != "ok"]
    for r in failed:
        print(f"failed: {r['key']}: {r['reason']}")
    if args.plot:
        path = plot_summary(summarize(report.rows), Path(args.out) / "summary.svg")
        print(f"plot -> {path}")
    return 0


def _scores_batch(path, label_col: str, score_col: str, group_cols: list[str]) -> tuple[SampleBatch, np.ndarray]:
    df = pd.read_csv(path)
    blocks = [pd.get_dummies(df[c].astype(str), prefix=c).to_numpy(dtype=float) for c in group_cols]
    batch = SampleBatch(features=np.zeros((len(df), 0)), labels=df[label_col].to_numpy(dtype=float),
                        sensitive=np.hstack(blocks))
    return batch, df[score_col].to_numpy(dtype=float)


def cmd_project(args) -> int:
    batch, h = _scores_batch(args.scores, args.label_column, args.score_column, args.group_column)
    config = ProjectionSolverConfig(max_iterations=args.max_iterations, residual_tolerance=args.tolerance)
    result = solve_projection(args.divergence, args.statistic, batch, h, config)
    value = float(projection_fairret(args.divergence, result.f_star, h).data)
    print(json.dumps({"fairret": value, "c": result.c, "iterations": result.iterations,
                      "converged": result.converged,
                      "max_residual": float(np.max(np.abs(result.residuals)))}, indent=2))
    if args.out:
        pd.DataFrame({"score": h, "projected": result.f_star}).to_csv(args.out, index=False)
    return 0


def cmd_study_batches(args) -> int:
    if args.scores:
        batch, h = _scores_batch(args.scores, args.label_column, args.score_column, args.group_column)
    else:
        batch = synthesize(SyntheticSpec.with_gap(args.gap, n=args.n, seed=args.seed))
        h = batch.meta["bayes_scores"]
    rows = batch_size_study(args.statistic, batch, h, args.sizes)
    print(f"{'size':>6} {'chunks':>7} {'skipped':>8} {'chunked':>12} {'full':>12} {'rel.err':>8}")
    for r in rows:
        print(f"{r.size:>6} {r.chunks:>7} {r.skipped:>8} {r.chunked:>12.6f} {r.full:>12.6f} {r.relative_error:>8.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairgrad", description="Fairness regularization terms for training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="write the full result (with history) as JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="run an experiment grid, resuming from existing results")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plot", action="store_true", help="also write summary.svg")
    p.set_defaults(func=cmd_grid)

    def score_args(p, required):
        p.add_argument("--scores", required=required, help="CSV with score, label and group columns")
        p.add_argument("--score-column", default="score")
        p.add_argument("--label-column", default="label")
        p.add_argument("--group-column", action="append", default=None,
                       help="categorical sensitive column (repeatable)")

    p = sub.add_parser("project", help="project scores onto the fair set")
    score_args(p, True)
    p.add_argument("--statistic", default="demographic_parity", choices=[*STATISTIC_NAMES, "dp", "eo", "pp", "te"])
    p.add_argument("--divergence", default="kl", choices=["kl", "js", "sed"])
    p.add_argument("--max-iterations", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--out", help="write scores and projected scores as CSV")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("study-batches", help="chunked SmoothMax versus the full-set value")
    score_args(p, False)
    p.add_argument("--statistic", default="demographic_parity")
    p.add_argument("--sizes", type=int, nargs="+", default=[64, 256, 1024, 4096])
    p.add_argument("--n", type=int, default=40_000, help="synthetic size when --scores is absent")
    p.add_argument("--gap", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_study_batches)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if getattr(args, "group_column", None) is None and hasattr(args, "group_column"):
        args.group_column = ["group"]
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
