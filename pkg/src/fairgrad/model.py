"""MLP probabilistic classifier, loss, Adam and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .data import batches
from .projection import JSProjection, KLProjection, Projection, SEDProjection
from .statistics import DegenerateGroupError, SampleBatch, make_statistic
from .violation import Norm, SmoothMax

log = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0
FAIRRET_NAMES = ("norm1", "norm2", "norminf", "smoothmax", "kl", "js", "sed")


@dataclass
class MlpParams:
    """Alternating weight/bias arrays.

    Hidden layers have ``(fan_in, fan_out)`` weights; the output layer has a
    weight vector and a scalar bias, producing one logit per sample.
    """

    arrays: list[np.ndarray]
    hidden_sizes: tuple[int, ...]

    @property
    def n_layers(self) -> int:
        return len(self.arrays) // 2

    def leaves(self) -> list[Tensor]:
        return [Tensor(a, requires_grad=True) for a in self.arrays]

    def copy(self) -> "MlpParams":
        return MlpParams([a.copy() for a in self.arrays], self.hidden_sizes)


def init_mlp(d_in: int, hidden_sizes: Sequence[int] = (256, 128, 32), seed: int = 0) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    rng = np.random.default_rng(seed)
    sizes = [int(d_in), *[int(s) for s in hidden_sizes]]
    arrays = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        arrays.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        arrays.append(rng.uniform(-bound, bound, fan_out))
    bound = 1.0 / math.sqrt(sizes[-1])
    arrays.append(rng.uniform(-bound, bound, sizes[-1]))
    arrays.append(np.asarray(rng.uniform(-bound, bound)))
    return MlpParams(arrays, tuple(int(s) for s in hidden_sizes))


def forward(params, features, surrogate_scale: float = 1.0) -> Tensor:
    """Probabilities ``sigmoid(clamp(a * r(x), -30, 30))``.

    ``params`` is an :class:`MlpParams` or the list of tensors returned by
    :meth:`MlpParams.leaves`.
    """
    if surrogate_scale <= 0:
        raise ValueError("surrogate_scale must be positive")
    arrays = params.arrays if isinstance(params, MlpParams) else list(params)
    x = ad.as_tensor(features)
    if x.ndim != 2:
        raise ad.ShapeError("forward", x.shape)
    n_hidden = len(arrays) // 2 - 1
    for i in range(n_hidden):
        x = ad.relu(ad.bias_add(ad.matmul(x, arrays[2 * i]), arrays[2 * i + 1]))
    logits = ad.matmul(x, arrays[-2]) + arrays[-1]
    if surrogate_scale != 1.0:
        logits = logits * surrogate_scale
    return ad.sigmoid(ad.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP))


def bce_loss(probabilities, labels) -> Tensor:
    p = ad.as_tensor(probabilities)
    y = np.asarray(labels, dtype=np.float64)
    return -ad.mean(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p))


def make_fairret(name: str, statistic="demographic_parity", *, max_iterations: int = 10,
                 tolerance: float = 1e-6, warm_start: bool = True):
    """Build a fairret from its config name (see ``FAIRRET_NAMES``)."""
    key = name.lower().replace("-", "").replace("_", "")
    if key in ("norm", "norm1"):
        return Norm(statistic, 1)
    if key == "norm2":
        return Norm(statistic, 2)
    if key in ("norminf", "norminfinity"):
        return Norm(statistic, math.inf)
    if key == "smoothmax":
        return SmoothMax(statistic)
    projections = {"kl": KLProjection, "js": JSProjection, "sed": SEDProjection}
    key = key.removesuffix("projection")
    if key in projections:
        return projections[key](statistic, max_iterations=max_iterations, tolerance=tolerance,
                                warm_start=warm_start)
    raise ValueError(f"unknown fairret {name!r}; expected one of {FAIRRET_NAMES}")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 4096
    epochs: int = 100
    warmup_epochs: int = 20
    strength: float = 0.0
    fairret: str = "kl"
    statistic: str = "demographic_parity"
    seed: int = 0
    surrogate_scale: float = 1.0
    hidden_sizes: tuple[int, ...] = (256, 128, 32)
    max_iterations: int = 10
    residual_tolerance: float = 1e-6
    warm_start: bool = True

    def __post_init__(self):
        self.hidden_sizes = tuple(int(s) for s in self.hidden_sizes)
        if self.strength < 0:
            raise ValueError("strength must be non-negative")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.batch_size < 1 or self.learning_rate <= 0 or self.surrogate_scale <= 0:
            raise ValueError("batch_size, learning_rate and surrogate_scale must be positive")
        make_statistic(self.statistic)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class ObjectiveTerms:
    total: Tensor
    loss: float
    fairret: float | None
    skipped: bool = False


def objective(batch: SampleBatch, params, config: TrainConfig, fairret=None, *,
              warmup: bool = False) -> ObjectiveTerms:
    """Cross-entropy plus ``strength * fairret`` on one mini-batch.

    The fairret is skipped entirely during warmup, at zero strength, and on
    batches where some group is absent or has a zero denominator.
    """
    h = forward(params, batch.features, config.surrogate_scale)
    loss = bce_loss(h, batch.labels)
    if warmup or config.strength == 0.0 or fairret is None:
        return ObjectiveTerms(loss, float(loss.data), None)
    try:
        r = fairret(batch, h)
    except DegenerateGroupError as exc:
        log.debug("fairret skipped on batch: %s", exc)
        return ObjectiveTerms(loss, float(loss.data), None, skipped=True)
    return ObjectiveTerms(loss + config.strength * r, float(loss.data), float(r.data))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params: Sequence[np.ndarray], gradients: Sequence[np.ndarray], state: AdamState,
              learning_rate: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> list[np.ndarray]:
    """One bias-corrected Adam update. ``state`` is advanced in place."""
    if len(params) != len(gradients) or len(params) != len(state.m):
        raise ValueError("params, gradients and state must have matching lengths")
    for g in gradients:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("adam_step: non-finite gradient")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    updated = []
    for i, (p, g) in enumerate(zip(params, gradients)):
        if state.m[i].shape != p.shape or g.shape != p.shape:
            raise ad.ShapeError("adam_step", p.shape, g.shape, state.m[i].shape)
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        updated.append(p - learning_rate * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps))
    return updated


@dataclass
class TrainResult:
    params: MlpParams
    history: list[dict] = field(default_factory=list)
    skipped_batches: int = 0
    projection_iterations: list[int] = field(default_factory=list)

    def predict(self, features, surrogate_scale: float = 1.0) -> np.ndarray:
        return forward(self.params, features, surrogate_scale).numpy()


def train(data: SampleBatch, config: TrainConfig, fairret=None,
          callback: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Mini-batch Adam on cross-entropy plus the configured fairret.

    Deterministic for a fixed ``config.seed``.
    """
    if fairret is None and config.strength > 0:
        fairret = make_fairret(config.fairret, config.statistic,
                               max_iterations=config.max_iterations,
                               tolerance=config.residual_tolerance,
                               warm_start=config.warm_start)
    params = init_mlp(data.features.shape[1], config.hidden_sizes, seed=config.seed)
    state = AdamState.zeros_like(params.arrays)
    result = TrainResult(params)
    for epoch in range(config.epochs):
        warmup = epoch < config.warmup_epochs
        losses, fairrets, skipped = [], [], 0
        for mb in batches(data, config.batch_size, config.seed, epoch):
            leaves = params.leaves()
            with Tape() as tape:
                terms = objective(mb, leaves, config, fairret, warmup=warmup)
            grads = tape.gradient(terms.total, leaves)
            params = MlpParams(adam_step(params.arrays, grads, state, config.learning_rate),
                               params.hidden_sizes)
            losses.append(terms.loss)
            if terms.fairret is not None:
                fairrets.append(terms.fairret)
            if terms.skipped:
                skipped += 1
            last = getattr(fairret, "last_result", None)
            if isinstance(fairret, Projection) and terms.fairret is not None and last is not None:
                result.projection_iterations.append(last.iterations)
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "fairret": float(np.mean(fairrets)) if fairrets else None,
            "skipped": skipped,
        }
        result.history.append(record)
        result.skipped_batches += skipped
        if callback is not None:
            callback(epoch, record)
    result.params = params
    return result
