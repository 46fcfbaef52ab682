"""Tabular ingestion, splitting, mini-batching and synthetic biased data."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit, logit

from .statistics import SampleBatch

BUNDLED_SCHEMAS = ("bank", "creditcard", "lawschool", "acsincome")


class SchemaError(ValueError):
    pass


# -- splitting and batching --------------------------------------------------


def split(batch: SampleBatch, ratio: float = 0.8, seed: int = 0) -> tuple[SampleBatch, SampleBatch]:
    """Seeded shuffle, then the first ``round(ratio * n)`` rows go to train."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    perm = np.random.default_rng(seed).permutation(batch.n)
    cut = int(round(ratio * batch.n))
    return batch.subset(np.sort(perm[:cut])), batch.subset(np.sort(perm[cut:]))


def batches(batch: SampleBatch, batch_size: int, seed: int = 0, epoch: int = 0) -> Iterator[SampleBatch]:
    """Shuffled mini-batches; the order depends on ``(seed, epoch)`` and the short tail is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if batch_size >= batch.n:
        yield batch
        return
    perm = np.random.default_rng([seed, epoch]).permutation(batch.n)
    for start in range(0, batch.n, batch_size):
        yield batch.subset(perm[start:start + batch_size])


# -- schemas -------------------------------------------------------------------


@dataclass
class ColumnSpec:
    name: str
    kind: str = "numeric"
    categories: list[str] | None = None
    min_fraction: float | None = None

    @classmethod
    def parse(cls, item) -> "ColumnSpec":
        if isinstance(item, str):
            return cls(item)
        return cls(**item)


@dataclass
class DatasetSchema:
    """Column roles and preprocessing rules for one CSV dataset.

    ``drop_rows_where`` entries look like ``{"column": "marital", "in": ["unknown"]}``.
    ``positive_value`` is either a literal or ``{"gt": threshold}``.
    """

    label: str
    positive_value: object
    features: list[ColumnSpec]
    sensitive: list[ColumnSpec]
    drop_columns: list[str] = field(default_factory=list)
    drop_rows_where: list[dict] = field(default_factory=list)
    standardize: bool = True
    name: str = "dataset"
    delimiter: str = ","
    value_maps: dict[str, dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        self.features = [ColumnSpec.parse(c) for c in self.features]
        self.sensitive = [ColumnSpec.parse(c) for c in self.sensitive]
        for c in self.features:
            if c.kind not in ("numeric", "categorical"):
                raise SchemaError(f"feature {c.name}: kind must be numeric or categorical")
        for c in self.sensitive:
            if c.kind not in ("categorical", "continuous"):
                raise SchemaError(f"sensitive {c.name}: kind must be categorical or continuous")
        overlap = {c.name for c in self.features} & {c.name for c in self.sensitive}
        if overlap:
            raise SchemaError(f"sensitive columns used as model features: {sorted(overlap)}")
        if self.label in {c.name for c in self.features}:
            raise SchemaError("label column cannot be a feature")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        d = {k: v for k, v in d.items() if not k.startswith("_")}
        return cls(**d)


def load_schema(name_or_path) -> DatasetSchema:
    """Load a bundled schema by name or a JSON schema file by path."""
    if str(name_or_path) in BUNDLED_SCHEMAS:
        text = resources.files("fairgrad.schemas").joinpath(f"{name_or_path}.json").read_text()
    else:
        text = Path(name_or_path).read_text()
    return DatasetSchema.from_dict(json.loads(text))


class CategoryEncoder:
    def __init__(self, categories: Sequence[str]):
        self.categories = list(categories)
        self._index = {c: i for i, c in enumerate(self.categories)}

    def encode(self, values) -> np.ndarray:
        values = list(values)
        unknown = [v for v in values if v not in self._index]
        if unknown:
            raise SchemaError(f"{len(unknown)} rows with unknown category values, e.g. {unknown[0]!r}")
        return np.array([self._index[v] for v in values], dtype=int)

    def decode(self, codes) -> list[str]:
        return [self.categories[int(i)] for i in codes]

    def one_hot(self, values) -> np.ndarray:
        return np.eye(len(self.categories))[self.encode(values)]


def _row_mask(df: pd.DataFrame, rule: dict) -> np.ndarray:
    col = rule["column"]
    if col not in df:
        raise SchemaError(f"drop rule refers to missing column {col!r}")
    if "in" in rule:
        return df[col].isin([str(v) for v in rule["in"]]).to_numpy()
    if "equals" in rule:
        return (df[col] == str(rule["equals"])).to_numpy()
    raise SchemaError(f"drop rule needs 'in' or 'equals': {rule}")


def _numeric(df: pd.DataFrame, col: str) -> np.ndarray:
    values = pd.to_numeric(df[col], errors="coerce")
    bad = int(values.isna().sum())
    if bad:
        raise SchemaError(f"{bad} rows with non-numeric values in column {col!r}")
    return values.to_numpy(dtype=np.float64)


def _categories(df: pd.DataFrame, spec: ColumnSpec) -> tuple[pd.Series, list[str]]:
    values = df[spec.name]
    if spec.min_fraction:
        freq = values.value_counts(normalize=True)
        rare = set(freq[freq < spec.min_fraction].index)
        if rare:
            values = values.where(~values.isin(rare), "other")
    cats = [str(c) for c in spec.categories] if spec.categories else sorted(values.unique())
    if spec.min_fraction and "other" in set(values) and "other" not in cats:
        cats.append("other")
    return values, cats


def load_dataset(schema: DatasetSchema, source) -> SampleBatch:
    """Read a CSV and encode it according to ``schema``.

    Numeric features are left raw; their column indices are stored in
    ``meta["numeric_columns"]`` so that :func:`standardize` can fit on a
    train split.
    """
    df = pd.read_csv(source, dtype=str, sep=schema.delimiter, keep_default_na=False,
                     skipinitialspace=True)
    df.columns = [c.strip() for c in df.columns]
    needed = [schema.label, *(c.name for c in schema.features), *(c.name for c in schema.sensitive)]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise SchemaError(f"missing columns: {missing}")
    for col, mapping in schema.value_maps.items():
        if col in df:
            df[col] = df[col].replace({str(k): str(v) for k, v in mapping.items()})
    df = df.drop(columns=[c for c in schema.drop_columns if c in df.columns])
    drop = np.zeros(len(df), dtype=bool)
    for rule in schema.drop_rows_where:
        drop |= _row_mask(df, rule)
    df = df.loc[~drop].reset_index(drop=True)
    if len(df) == 0:
        raise SchemaError("no rows left after applying drop rules")

    pos = schema.positive_value
    if isinstance(pos, dict) and "gt" in pos:
        labels = (_numeric(df, schema.label) > float(pos["gt"])).astype(float)
    else:
        labels = (df[schema.label] == str(pos)).to_numpy(dtype=float)

    blocks, names, numeric_cols, encoders = [], [], [], {}
    for spec in schema.features:
        if spec.kind == "numeric":
            numeric_cols.append(sum(b.shape[1] for b in blocks))
            blocks.append(_numeric(df, spec.name)[:, None])
            names.append(spec.name)
        else:
            values, cats = _categories(df, spec)
            enc = CategoryEncoder(cats)
            encoders[spec.name] = enc
            blocks.append(enc.one_hot(values))
            names.extend(f"{spec.name}={c}" for c in cats)
    X = np.hstack(blocks) if blocks else np.zeros((len(df), 0))

    s_blocks, s_names = [], []
    for spec in schema.sensitive:
        if spec.kind == "continuous":
            s_blocks.append(_numeric(df, spec.name)[:, None])
            s_names.append(spec.name)
        else:
            values, cats = _categories(df, spec)
            enc = CategoryEncoder(cats)
            encoders[spec.name] = enc
            s_blocks.append(enc.one_hot(values))
            s_names.extend(f"{spec.name}={c}" for c in cats)
    S = np.hstack(s_blocks)

    return SampleBatch(
        features=X,
        labels=labels,
        sensitive=S,
        feature_names=tuple(names),
        sensitive_names=tuple(s_names),
        meta={"numeric_columns": numeric_cols, "encoders": encoders, "dataset": schema.name},
    )


@dataclass
class Standardizer:
    columns: list[int]
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, batch: SampleBatch, columns: Sequence[int] | None = None) -> "Standardizer":
        cols = list(batch.meta.get("numeric_columns", []) if columns is None else columns)
        X = batch.features[:, cols]
        std = X.std(axis=0)
        return cls(cols, X.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, batch: SampleBatch) -> SampleBatch:
        X = batch.features.copy()
        X[:, self.columns] = (X[:, self.columns] - self.mean) / self.std
        return SampleBatch(X, batch.labels, batch.sensitive, batch.condition_weights,
                           batch.partition, batch.feature_names, batch.sensitive_names, dict(batch.meta))


def standardize(train: SampleBatch, *others: SampleBatch) -> tuple[SampleBatch, ...]:
    """Standardize numeric columns with statistics of ``train`` only."""
    scaler = Standardizer.fit(train)
    return tuple(scaler.apply(b) for b in (train, *others))


def prepare_dataset(schema: DatasetSchema, source, ratio: float = 0.8,
                    seed: int = 0) -> tuple[SampleBatch, SampleBatch]:
    batch = load_dataset(schema, source)
    train, test = split(batch, ratio, seed)
    if schema.standardize:
        train, test = standardize(train, test)
    return train, test


# -- synthetic data ----------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Group-dependent Gaussian features and logistic labels.

    Feature 0 is shifted by group (so group membership leaks into the
    inputs); the label logit is ``w.x / noise + b_k`` with ``w`` a unit
    direction over the remaining features and ``b_k`` chosen so group ``k``
    has the requested base rate. The disparity between groups is the
    difference between their base rates.
    """

    n: int = 10_000
    d_x: int = 5
    proportions: tuple[float, ...] = (0.5, 0.5)
    base_rates: tuple[float, ...] = (0.5, 0.5)
    group_shift: float = 1.0
    noise: float = 1.0
    seed: int = 0
    exact_base_rates: bool = False

    def __post_init__(self):
        self.proportions = tuple(float(p) for p in self.proportions)
        self.base_rates = tuple(float(p) for p in self.base_rates)
        if self.n < 1 or self.d_x < 1:
            raise ValueError("n and d_x must be positive")
        if len(self.proportions) != len(self.base_rates):
            raise ValueError("proportions and base_rates must have one entry per group")
        if abs(sum(self.proportions) - 1.0) > 1e-9 or min(self.proportions) <= 0:
            raise ValueError("proportions must be positive and sum to 1")
        if not all(0.0 < b < 1.0 for b in self.base_rates):
            raise ValueError("base rates must lie strictly between 0 and 1")
        if self.noise <= 0:
            raise ValueError("noise must be positive")

    @classmethod
    def with_gap(cls, gap: float, mean_rate: float = 0.45, **kwargs) -> "SyntheticSpec":
        """Two equally sized groups whose base rates differ by ``gap``."""
        rates = (mean_rate + gap / 2, mean_rate - gap / 2)
        if not all(0.0 < r < 1.0 for r in rates):
            raise ValueError(f"gap {gap} around mean rate {mean_rate} gives base rates {rates} outside (0, 1)")
        return cls(proportions=(0.5, 0.5), base_rates=rates, **kwargs)

    @property
    def n_groups(self) -> int:
        return len(self.proportions)

    def group_means(self) -> np.ndarray:
        k = np.arange(self.n_groups)
        return self.group_shift * (k - (self.n_groups - 1) / 2)

    def direction(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 7])
        w = np.zeros(self.d_x)
        if self.d_x == 1:
            w[0] = 1.0
        else:
            w[1:] = rng.normal(size=self.d_x - 1)
            w /= np.linalg.norm(w)
        return w

    def intercepts(self) -> np.ndarray:
        """Per-group intercepts realizing the base rates in expectation."""
        w = self.direction()
        nodes, weights = np.polynomial.hermite_e.hermegauss(80)
        weights = weights / weights.sum()
        out = []
        for mu_k, rate in zip(self.group_means(), self.base_rates):
            z = (w[0] * mu_k + nodes) / self.noise

            def gap(b, z=z, rate=rate):
                return float(weights @ expit(z + b)) - rate

            out.append(brentq(gap, -60.0, 60.0, xtol=1e-14))
        return np.array(out)


def synthesize(spec: SyntheticSpec) -> SampleBatch:
    """Draw a one-hot partitioned batch; Bayes scores go to ``meta["bayes_scores"]``."""
    rng = np.random.default_rng(spec.seed)
    d_s = spec.n_groups
    if spec.exact_base_rates:
        counts = np.floor(np.array(spec.proportions) * spec.n).astype(int)
        counts[-1] = spec.n - counts[:-1].sum()
        groups = rng.permutation(np.repeat(np.arange(d_s), counts))
    else:
        groups = rng.choice(d_s, size=spec.n, p=spec.proportions)
    X = rng.normal(size=(spec.n, spec.d_x))
    X[:, 0] += spec.group_means()[groups]
    w = spec.direction()
    b = spec.intercepts()
    raw = X @ w
    if spec.d_x == 1:
        raw = raw - spec.group_means()[groups]
    scores = expit(raw / spec.noise + b[groups])
    if spec.exact_base_rates:
        labels = np.zeros(spec.n)
        for k in range(d_s):
            idx = np.flatnonzero(groups == k)
            m = int(round(spec.base_rates[k] * idx.size))
            keys = logit(np.clip(scores[idx], 1e-300, 1 - 1e-16)) + rng.gumbel(size=idx.size)
            labels[idx[np.argsort(-keys)[:m]]] = 1.0
    else:
        labels = (rng.random(spec.n) < scores).astype(float)
    S = np.eye(d_s)[groups]
    return SampleBatch(
        features=X,
        labels=labels,
        sensitive=S,
        partition=True,
        feature_names=tuple(f"x{i}" for i in range(spec.d_x)),
        sensitive_names=tuple(f"group{k}" for k in range(d_s)),
        meta={"bayes_scores": scores, "groups": groups},
    )
