"""Linear-fractional group statistics and their fairness constraints.

A statistic is specified by four per-sample coefficient vectors computed
from the labels (and optionally a conditioning weight). For sensitive
column ``k`` and scores ``h`` its group value is::

    gamma_k(h) = sum_i s_ik (alpha0_i + h_i beta0_i) / sum_i s_ik (alpha1_i + h_i beta1_i)

and the overall value drops the ``s_ik`` weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ZERO_THRESHOLD = 1e-12


class DegenerateGroupError(ValueError):
    """A group (or the overall population) has a zero statistic denominator."""

    def __init__(self, group: int | None, denominator: float):
        self.group = group
        self.denominator = denominator
        where = "overall population" if group is None else f"group {group}"
        super().__init__(f"zero statistic denominator for {where} ({denominator:.3g})")


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Features, binary labels and sensitive values for ``n`` individuals.

    ``sensitive`` is an ``n x d_s`` real matrix. Set ``partition=True`` to
    require that every row is one-hot.
    """

    features: np.ndarray
    labels: np.ndarray
    sensitive: np.ndarray
    condition_weights: np.ndarray | None = None
    partition: bool = False
    feature_names: tuple[str, ...] = ()
    sensitive_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        S = np.asarray(self.sensitive, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if S.ndim == 1:
            S = S.reshape(-1, 1)
        n = y.shape[0]
        if n < 1:
            raise ValueError("batch must contain at least one sample")
        if X.shape[0] != n or S.shape[0] != n:
            raise ValueError(
                f"row counts disagree: features {X.shape[0]}, labels {n}, sensitive {S.shape[0]}"
            )
        for name, arr in (("features", X), ("labels", y), ("sensitive", S)):
            if np.isnan(arr).any():
                raise ValueError(f"{name} contain NaN")
        if not np.isin(y, (0.0, 1.0)).all():
            raise ValueError("labels must be binary (0 or 1)")
        if self.partition:
            if not (np.isin(S, (0.0, 1.0)).all() and np.all(S.sum(axis=1) == 1.0)):
                raise ValueError("partition fairness requires one-hot sensitive rows")
        zeta = self.condition_weights
        if zeta is not None:
            zeta = np.asarray(zeta, dtype=np.float64).reshape(-1)
            if zeta.shape[0] != n or np.isnan(zeta).any():
                raise ValueError("condition_weights must be a finite n-vector")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "sensitive", S)
        object.__setattr__(self, "condition_weights", zeta)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def n_groups(self) -> int:
        return self.sensitive.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, index) -> "SampleBatch":
        index = np.asarray(index)
        meta = {
            k: v[index] if isinstance(v, np.ndarray) and v.shape[:1] == (self.n,) else v
            for k, v in self.meta.items()
        }
        return SampleBatch(
            features=self.features[index],
            labels=self.labels[index],
            sensitive=self.sensitive[index],
            condition_weights=None if self.condition_weights is None else self.condition_weights[index],
            partition=self.partition,
            feature_names=self.feature_names,
            sensitive_names=self.sensitive_names,
            meta=meta,
        )


class Coefficients(NamedTuple):
    alpha0: np.ndarray
    beta0: np.ndarray
    alpha1: np.ndarray
    beta1: np.ndarray


CoefficientFn = Callable[[np.ndarray, np.ndarray, "np.ndarray | None"], Coefficients]


@dataclass(frozen=True)
class StatisticDef:
    """A named linear-fractional statistic.

    The evaluator sees only features, labels and condition weights, so the
    coefficients cannot depend on the sensitive values or on the scores.
    """

    name: str
    evaluator: CoefficientFn
    linear: bool

    def coefficients(self, batch: SampleBatch) -> Coefficients:
        return self.evaluate(batch.features, batch.labels, batch.condition_weights)

    def evaluate(self, features, labels, condition_weights=None) -> Coefficients:
        coefs = self.evaluator(features, labels, condition_weights)
        n = len(labels)
        return Coefficients(*(np.broadcast_to(np.asarray(c, dtype=np.float64), (n,)).copy() for c in coefs))


def _constant(v: float):
    return lambda y: np.full(y.shape, float(v))


def _table_row(a0, b0, a1, b1) -> CoefficientFn:
    def evaluator(features, labels, condition_weights=None):
        y = np.asarray(labels, dtype=np.float64)
        return Coefficients(a0(y), b0(y), a1(y), b1(y))

    return evaluator


def _conditional_dp(features, labels, condition_weights=None):
    if condition_weights is None:
        raise ValueError("conditional_demographic_parity requires condition_weights")
    zeta = np.asarray(condition_weights, dtype=np.float64)
    zero = np.zeros_like(zeta)
    return Coefficients(zero, zeta, zeta, zero)


_zero, _one = _constant(0.0), _constant(1.0)

# (alpha0, beta0, alpha1, beta1) per notion
_TABLE: dict[str, tuple[CoefficientFn, bool]] = {
    "demographic_parity": (_table_row(_zero, _one, _one, _zero), True),
    "conditional_demographic_parity": (_conditional_dp, True),
    "equal_opportunity": (_table_row(_zero, lambda y: y, lambda y: y, _zero), True),
    "false_positive_parity": (_table_row(_zero, lambda y: 1 - y, lambda y: 1 - y, _zero), True),
    "predictive_parity": (_table_row(_zero, lambda y: y, _zero, _one), False),
    "false_omission_parity": (_table_row(lambda y: y, lambda y: -y, _one, _constant(-1.0)), False),
    "accuracy_equality": (_table_row(lambda y: 1 - y, lambda y: 2 * y - 1, _one, _zero), True),
    "treatment_equality": (_table_row(lambda y: y, lambda y: -y, _zero, lambda y: 1 - y), False),
}

ALIASES = {
    "dp": "demographic_parity",
    "cdp": "conditional_demographic_parity",
    "eo": "equal_opportunity",
    "fpp": "false_positive_parity",
    "pp": "predictive_parity",
    "fop": "false_omission_parity",
    "ae": "accuracy_equality",
    "te": "treatment_equality",
}

STATISTIC_NAMES = tuple(_TABLE)


def make_statistic(name: str) -> StatisticDef:
    """Look up a statistic by its name (or short alias such as ``"dp"``)."""
    key = ALIASES.get(name.lower(), name.lower())
    if key not in _TABLE:
        raise ValueError(f"unknown statistic {name!r}; expected one of {sorted(_TABLE)}")
    evaluator, linear = _TABLE[key]
    return StatisticDef(key, evaluator, linear)


def _as_statistic(stat) -> StatisticDef:
    return stat if isinstance(stat, StatisticDef) else make_statistic(stat)


@dataclass
class GroupStatistics:
    per_group: Tensor
    overall: Tensor


@dataclass
class ViolationVector:
    values: Tensor
    fallback_used: bool = False

    def numpy(self) -> np.ndarray:
        return self.values.numpy()


def _scores(h, n: int) -> Tensor:
    h = ad.as_tensor(h)
    if h.shape != (n,):
        raise ad.ShapeError("scores", h.shape, (n,))
    return h


def group_statistics(stat, batch: SampleBatch, h) -> GroupStatistics:
    """Per-group and overall statistic values, differentiable in ``h``."""
    stat = _as_statistic(stat)
    h = _scores(h, batch.n)
    a0, b0, a1, b1 = stat.coefficients(batch)
    n = batch.n
    num_terms = a0 + h * b0
    den_terms = a1 + h * b1
    St = batch.sensitive.T / n
    num = ad.matmul(St, num_terms)
    den = ad.matmul(St, den_terms)
    bad = np.flatnonzero(np.abs(den.data) < ZERO_THRESHOLD)
    if bad.size:
        k = int(bad[0])
        raise DegenerateGroupError(k, float(den.data[k]))
    overall_den = ad.mean(den_terms)
    if abs(overall_den.data) < ZERO_THRESHOLD:
        raise DegenerateGroupError(None, float(overall_den.data))
    return GroupStatistics(per_group=num / den, overall=ad.mean(num_terms) / overall_den)


def violation(stat, batch: SampleBatch, h) -> ViolationVector:
    """Normalized per-group violation ``|gamma_k / overall - 1|``.

    Falls back to ``|gamma_k|`` when the overall value is zero.
    """
    gs = group_statistics(stat, batch, h)
    if abs(gs.overall.data) <= ZERO_THRESHOLD:
        return ViolationVector(ad.absolute(gs.per_group), fallback_used=True)
    return ViolationVector(ad.absolute(gs.per_group / gs.overall - 1.0), fallback_used=False)


@dataclass
class LinearConstraintSystem:
    """Linear constraints ``mean_i s_ik (alpha_i + f_i beta_i) = 0`` for fixed ``c``."""

    alpha: np.ndarray
    beta: np.ndarray
    sensitive: np.ndarray
    c: float

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    def residual(self, f) -> np.ndarray:
        f = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
        return self.sensitive.T @ (self.alpha + f * self.beta) / self.n


def fixed_constraints(stat, batch: SampleBatch, c: float) -> LinearConstraintSystem:
    c = float(c)
    if not np.isfinite(c):
        raise ValueError("c must be finite")
    a0, b0, a1, b1 = _as_statistic(stat).coefficients(batch)
    return LinearConstraintSystem(alpha=a0 - c * a1, beta=b0 - c * b1, sensitive=batch.sensitive, c=c)
