"""Metrics, experiment grids, seed aggregation and the batch-size study."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import SyntheticSpec, load_schema, prepare_dataset, split, synthesize
from .model import TrainConfig, train
from .projection import ProjectionInfeasibleError
from .autodiff import NonFiniteError
from .statistics import DegenerateGroupError, SampleBatch, violation
from .violation import smoothmax_fairret

log = logging.getLogger(__name__)

EVALUATED_STATISTICS = ("demographic_parity", "equal_opportunity", "predictive_parity", "treatment_equality")
SHORT = {"demographic_parity": "dp", "equal_opportunity": "eo", "predictive_parity": "pp",
         "treatment_equality": "te"}


class UndefinedMetricError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Area under the ROC curve from average ranks (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def max_violation(stat, batch: SampleBatch, h) -> float:
    return float(np.max(violation(stat, batch, h).numpy()))


# -- single runs ----------------------------------------------------------------


@dataclass
class RunResult:
    config: dict
    history: list[dict]
    train_auroc: float
    test_auroc: float
    train_violations: dict[str, float]
    test_violations: dict[str, float]
    seconds: float
    skipped_batches: int
    status: str = "ok"
    reason: str = ""

    def row(self) -> dict:
        out = dict(self.config)
        out.update(status=self.status, reason=self.reason, seconds=self.seconds,
                   skipped_batches=self.skipped_batches,
                   train_auroc=self.train_auroc, test_auroc=self.test_auroc)
        for name in EVALUATED_STATISTICS:
            out[f"train_{SHORT[name]}"] = self.train_violations.get(name, math.nan)
            out[f"test_{SHORT[name]}"] = self.test_violations.get(name, math.nan)
        return out


def _safe_violation(stat, batch, h) -> float:
    try:
        return max_violation(stat, batch, h)
    except DegenerateGroupError:
        return math.nan


def evaluate(train_set: SampleBatch, test_set: SampleBatch, predict) -> tuple[float, float, dict, dict]:
    h_train, h_test = predict(train_set.features), predict(test_set.features)
    train_v = {s: _safe_violation(s, train_set, h_train) for s in EVALUATED_STATISTICS}
    test_v = {s: _safe_violation(s, test_set, h_test) for s in EVALUATED_STATISTICS}
    return auroc(h_train, train_set.labels), auroc(h_test, test_set.labels), train_v, test_v


def run_training(train_set: SampleBatch, test_set: SampleBatch, config: TrainConfig,
                 echo: dict | None = None) -> RunResult:
    """Train one model and evaluate it; failures become a non-ok result."""
    echo = dict(echo or config.to_dict())
    start = time.perf_counter()
    try:
        result = train(train_set, config)
        tr_auc, te_auc, tr_v, te_v = evaluate(train_set, test_set, result.predict)
    except (NonFiniteError, ProjectionInfeasibleError, FloatingPointError, ValueError) as exc:
        log.warning("run failed: %s", exc)
        return RunResult(echo, [], math.nan, math.nan, {}, {}, time.perf_counter() - start, 0,
                         status="failed", reason=f"{type(exc).__name__}: {exc}")
    return RunResult(echo, result.history, tr_auc, te_auc, tr_v, te_v,
                     time.perf_counter() - start, result.skipped_batches)


# -- grids ------------------------------------------------------------------------


@dataclass
class GridSpec:
    """Cartesian product of statistic x fairret x strength x seed on one dataset.

    ``dataset`` is either ``{"synthetic": {...SyntheticSpec fields}}`` or
    ``{"schema": name_or_path, "path": csv_path}``. ``train`` holds
    :class:`TrainConfig` overrides shared by all cells.
    """

    dataset: dict
    statistics: list[str] = field(default_factory=lambda: ["demographic_parity"])
    fairrets: list[str] = field(default_factory=lambda: ["kl"])
    strengths: list[float] = field(default_factory=lambda: [0.0, 1.0])
    seeds: list[int] = field(default_factory=lambda: [0])
    train: dict = field(default_factory=dict)
    split_ratio: float = 0.8

    def __post_init__(self):
        if not (self.statistics and self.fairrets and self.strengths and self.seeds):
            raise ValueError("grid axes must be non-empty")

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**d)

    def dataset_name(self) -> str:
        if "synthetic" in self.dataset:
            return "synthetic"
        return Path(str(self.dataset["schema"])).stem

    def cells(self) -> list[dict]:
        return [
            {"dataset": self.dataset_name(), "statistic": st, "fairret": fr,
             "strength": float(lam), "seed": int(seed)}
            for st, fr, lam, seed in itertools.product(self.statistics, self.fairrets,
                                                       self.strengths, self.seeds)
        ]


def cell_key(cell: dict) -> str:
    return f"{cell['dataset']}|{cell['statistic']}|{cell['fairret']}|{float(cell['strength'])!r}|{int(cell['seed'])}"


_DATA_CACHE: dict = {}


def _load(spec: GridSpec, seed: int) -> tuple[SampleBatch, SampleBatch]:
    if "synthetic" in spec.dataset:
        key = ("synthetic", tuple(sorted((k, str(v)) for k, v in spec.dataset["synthetic"].items())))
        if key not in _DATA_CACHE:
            _DATA_CACHE[key] = synthesize(SyntheticSpec(**spec.dataset["synthetic"]))
        return split(_DATA_CACHE[key], spec.split_ratio, seed)
    schema = load_schema(spec.dataset["schema"])
    return prepare_dataset(schema, spec.dataset["path"], spec.split_ratio, seed)


def run_cell(spec: GridSpec, cell: dict) -> RunResult:
    overrides = dict(spec.train)
    overrides.update(statistic=cell["statistic"], fairret=cell["fairret"],
                     strength=cell["strength"], seed=cell["seed"])
    config = TrainConfig.from_dict(overrides)
    echo = {"key": cell_key(cell), **cell, "max_iterations": config.max_iterations}
    try:
        train_set, test_set = _load(spec, cell["seed"])
    except (OSError, ValueError) as exc:
        return RunResult(echo, [], math.nan, math.nan, {}, {}, 0.0, 0,
                         status="failed", reason=f"{type(exc).__name__}: {exc}")
    return run_training(train_set, test_set, config, echo)


def _run_cell_row(spec: GridSpec, cell: dict) -> dict:
    return run_cell(spec, cell).row()


RESULT_FIELDS = ["key", "dataset", "statistic", "fairret", "strength", "seed", "max_iterations",
                 "status", "reason", "seconds", "skipped_batches", "train_auroc", "test_auroc",
                 *(f"{part}_{SHORT[s]}" for s in EVALUATED_STATISTICS for part in ("train", "test"))]


def read_results(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class GridReport:
    rows: list[dict]
    computed: int
    skipped_existing: int
    path: Path


def run_grid(spec: GridSpec, out_dir, workers: int = 1) -> GridReport:
    """Run every missing cell, appending one CSV row per run to ``results.csv``.

    Cells whose key already appears in the file are not recomputed. Only
    the calling process writes to the file.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "results.csv"
    done = {r["key"] for r in read_results(path)}
    todo = [c for c in spec.cells() if cell_key(c) not in done]
    new_file = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, extrasaction="ignore")
        if new_file:
            writer.writeheader()

        def emit(row):
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            fh.flush()

        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_cell_row, spec, c) for c in todo]
                for fut in as_completed(futures):
                    emit(fut.result())
        else:
            for c in todo:
                emit(_run_cell_row(spec, c))
    return GridReport(read_results(path), len(todo), len(spec.cells()) - len(todo), path)


# -- aggregation -----------------------------------------------------------------


@dataclass
class EllipseStats:
    mean: np.ndarray
    covariance: np.ndarray
    n_points: int

    def ellipse(self, n_std: float = 1.0) -> tuple[float, float, float]:
        """Width, height and angle in degrees of the ``n_std`` ellipse."""
        vals, vecs = np.linalg.eigh(self.covariance)
        vals = np.clip(vals, 0.0, None)
        angle = math.degrees(math.atan2(vecs[1, 1], vecs[0, 1]))
        return 2 * n_std * math.sqrt(vals[1]), 2 * n_std * math.sqrt(vals[0]), angle


def ellipse_stats(points) -> EllipseStats:
    """Mean of (violation, AUROC) points and the covariance of that mean."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError("points must be an (k, 2) array")
    if p.shape[0] < 2:
        raise ValueError("ellipse statistics need at least 2 points")
    return EllipseStats(p.mean(axis=0), np.cov(p, rowvar=False, ddof=1) / p.shape[0], p.shape[0])


def summarize(rows: Iterable[dict], split_name: str = "test") -> list[dict]:
    """Seed-aggregated (optimized violation, AUROC) per method and strength."""
    groups: dict[tuple, list] = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        key = (r["dataset"], r["statistic"], r["fairret"], float(r["strength"]))
        col = f"{split_name}_{SHORT.get(r['statistic'], r['statistic'])}"
        groups.setdefault(key, []).append((float(r[col]), float(r[f"{split_name}_auroc"])))
    out = []
    for (ds, st, fr, lam), pts in sorted(groups.items()):
        entry = {"dataset": ds, "statistic": st, "fairret": fr, "strength": lam, "seeds": len(pts),
                 "violation": float(np.mean([p[0] for p in pts])),
                 "auroc": float(np.mean([p[1] for p in pts]))}
        if len(pts) >= 2:
            entry["ellipse"] = ellipse_stats(pts)
        out.append(entry)
    return out


def plot_summary(summary: Sequence[dict], path) -> Path:
    """Scatter of (violation, AUROC) with standard-error ellipses, saved as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Ellipse

    fig, ax = plt.subplots(figsize=(6, 4.5))
    colors: dict[str, str] = {}
    for entry in summary:
        name = entry["fairret"]
        first = name not in colors
        color = colors.setdefault(name, f"C{len(colors)}")
        ax.scatter(entry["violation"], entry["auroc"], color=color, label=name if first else None)
        if "ellipse" in entry:
            w, h, angle = entry["ellipse"].ellipse()
            ax.add_patch(Ellipse(entry["ellipse"].mean, w, h, angle=angle, color=color, alpha=0.25))
    ax.set_xlabel("violation")
    ax.set_ylabel("AUROC")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


# -- batch-size study ----------------------------------------------------------------


@dataclass
class BatchStudyRow:
    size: int
    chunks: int
    skipped: int
    chunked: float
    full: float

    @property
    def relative_error(self) -> float:
        return abs(self.chunked - self.full) / abs(self.full) if self.full else math.inf


def smoothmax_value(stat, batch: SampleBatch, h) -> float:
    return float(smoothmax_fairret(violation(stat, batch, h)).data)


def batch_size_study(stat, batch: SampleBatch, h, sizes: Sequence[int]) -> list[BatchStudyRow]:
    """Mean SmoothMax over consecutive chunks of each size, next to the full-set value.

    Chunks where some group is absent are skipped and counted.
    """
    h = np.asarray(h, dtype=np.float64)
    full = smoothmax_value(stat, batch, h)
    rows = []
    for size in sizes:
        if not 1 <= size <= batch.n:
            raise ValueError(f"chunk size {size} outside [1, {batch.n}]")
        values, skipped = [], 0
        for start in range(0, batch.n, size):
            idx = np.arange(start, min(start + size, batch.n))
            try:
                values.append(smoothmax_value(stat, batch.subset(idx), h[idx]))
            except DegenerateGroupError:
                skipped += 1
        chunked = float(np.mean(values)) if values else math.nan
        rows.append(BatchStudyRow(int(size), len(values), skipped, chunked, full))
    return rows
