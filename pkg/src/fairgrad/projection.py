"""Projection fairrets.

The score vector ``h`` is projected onto the scores ``f`` whose group
statistics all equal the overall statistic of ``h``. For a fixed target the
constraints are linear in ``f``, so the projection is solved through its
dual (one multiplier per sensitive column) with per-sample closed forms:

* KL:  f = sigmoid(logit(h) - u)
* SED: f = clip(h - u / 4, 0, 1)
* JS:  0.5 * (logit(f) - logit((f + h) / 2)) + u = 0, solved by bisection

where ``u_i = beta_i * sum_k lambda_k s_ik``. The fairret value is the mean
divergence between the projection (held fixed) and ``h``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit, logit, rel_entr, xlogy

from . import autodiff as ad
from .autodiff import DomainError, Tensor
from .statistics import (
    ZERO_THRESHOLD,
    DegenerateGroupError,
    SampleBatch,
    fixed_constraints,
    make_statistic,
)

JS_BRACKET = (1e-12, 1.0 - 1e-12)
JS_WIDTH = 1e-12
ARMIJO = 1e-4


class DivergenceKind(str, Enum):
    KL = "kl"
    JS = "js"
    SED = "sed"


class ProjectionInfeasibleError(ValueError):
    """The scores cannot move the statistic of some group."""

    def __init__(self, group: int):
        self.group = group
        super().__init__(f"constraint for group {group} does not depend on the scores")


class RootBracketError(ArithmeticError):
    """Bisection end points do not bracket the stationarity root."""


@dataclass
class ProjectionSolverConfig:
    max_iterations: int = 10
    residual_tolerance: float = 1e-6
    warm_start: np.ndarray | None = None
    max_backtracks: int = 40
    polish: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.residual_tolerance <= 0:
            raise ValueError("residual_tolerance must be positive")


@dataclass
class ProjectionResult:
    f_star: np.ndarray
    duals: np.ndarray
    residuals: np.ndarray
    iterations: int
    converged: bool
    c: float
    dual_values: list[float] = field(default_factory=list)
    polished: bool = False


def _kind(kind) -> DivergenceKind:
    return kind if isinstance(kind, DivergenceKind) else DivergenceKind(str(kind).lower())


def _check_interior(h: np.ndarray) -> None:
    if np.any(h <= 0.0) or np.any(h >= 1.0):
        raise DomainError("scores must lie strictly inside (0, 1)")


def divergence(kind, f, h) -> np.ndarray:
    """Per-sample divergence ``D(f || h)`` between Bernoulli parameters."""
    kind = _kind(kind)
    f = np.asarray(f, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    _check_interior(h)
    if np.any(f < 0.0) or np.any(f > 1.0):
        raise DomainError("f must lie in [0, 1]")
    if kind is DivergenceKind.KL:
        return rel_entr(f, h) + rel_entr(1.0 - f, 1.0 - h)
    if kind is DivergenceKind.JS:
        m = 0.5 * (f + h)
        return 0.5 * (rel_entr(f, m) + rel_entr(1.0 - f, 1.0 - m)) + 0.5 * (
            rel_entr(h, m) + rel_entr(1.0 - h, 1.0 - m)
        )
    return 2.0 * (f - h) ** 2


# -- per-sample minimizers of D(f || h) + u f ------------------------------


def _js_stationarity(f, h, u):
    m = 0.5 * (f + h)
    return 0.5 * (logit(f) - logit(m)) + u


def _js_argmin(h: np.ndarray, u: np.ndarray) -> np.ndarray:
    lo = np.full_like(h, JS_BRACKET[0])
    hi = np.full_like(h, JS_BRACKET[1])
    if np.any(_js_stationarity(lo, h, u) > 0.0) or np.any(_js_stationarity(hi, h, u) < 0.0):
        raise RootBracketError("JS stationarity root lies outside the bisection bracket")
    while np.max(hi - lo) > JS_WIDTH:
        mid = 0.5 * (lo + hi)
        pos = _js_stationarity(mid, h, u) > 0.0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
    return 0.5 * (lo + hi)


def _argmin(kind: DivergenceKind, h: np.ndarray, logit_h: np.ndarray, u: np.ndarray):
    """Minimizer ``f`` and the inverse curvature ``1 / D''(f)`` (0 where clamped)."""
    if kind is DivergenceKind.KL:
        z = logit_h - u
        f = expit(z)
        return f, f * expit(-z)
    if kind is DivergenceKind.SED:
        raw = h - 0.25 * u
        free = (raw > 0.0) & (raw < 1.0)
        return np.clip(raw, 0.0, 1.0), np.where(free, 0.25, 0.0)
    f = _js_argmin(h, u)
    m = 0.5 * (f + h)
    curv = 0.5 * (1.0 / (f * (1.0 - f)) - 0.5 / (m * (1.0 - m)))
    return f, 1.0 / curv


@dataclass
class _DualPoint:
    duals: np.ndarray
    f: np.ndarray
    inv_curv: np.ndarray
    value: float
    residual: np.ndarray


class _Dual:
    def __init__(self, kind, h, S, alpha, beta):
        self.kind = kind
        self.h = h
        self.logit_h = logit(h)
        self.S = S
        self.alpha = alpha
        self.beta = beta
        self.n = h.shape[0]
        # curvature scale used when a group has no free samples
        self.ref_diag = (S**2).T @ (beta**2) / self.n * 0.25

    def at(self, duals: np.ndarray) -> _DualPoint:
        w = self.S @ duals
        f, inv_curv = _argmin(self.kind, self.h, self.logit_h, w * self.beta)
        lin = self.alpha + f * self.beta
        value = float(np.mean(divergence(self.kind, f, self.h) + w * lin))
        residual = self.S.T @ lin / self.n
        return _DualPoint(duals, f, inv_curv, value, residual)

    def neg_hessian(self, point: _DualPoint) -> np.ndarray:
        weights = self.beta**2 * point.inv_curv
        H = (self.S * weights[:, None]).T @ self.S / self.n
        flat = np.diag(H) < 1e-10 * self.ref_diag
        if flat.any():
            H[flat, :] = 0.0
            H[:, flat] = 0.0
            H[flat, flat] = self.ref_diag[flat]
        return H


def _solve(H: np.ndarray, r: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(H, r)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, r, rcond=None)[0]


def _restore_feasibility(kind: DivergenceKind, point: _DualPoint, system, rounds: int = 8):
    """Move ``point.f`` onto the constraint set along the dual's linearization.

    Samples pushed outside the domain are clipped and frozen, and the remaining
    residual is redistributed over the others. Returns the corrected scores
    and the accumulated multiplier change, or ``None`` when the residual
    would not shrink.
    """
    S, beta, n = system.sensitive, system.beta, system.n
    lo, hi = (0.0, 1.0) if kind is DivergenceKind.SED else JS_BRACKET
    weight = point.inv_curv.copy()
    f = point.f.copy()
    delta = np.zeros(S.shape[1])
    start = np.max(np.abs(point.residual))
    for _ in range(rounds):
        r = system.residual(f)
        if not np.any(r != 0.0) or not np.any(weight > 0.0):
            break
        H = (S * (beta**2 * weight)[:, None]).T @ S / n
        step = _solve(H, r)
        raw = f - weight * beta * (S @ step)
        clipped = (raw < lo) | (raw > hi)
        f = np.clip(raw, lo, hi)
        delta += step
        weight[clipped] = 0.0
        if not clipped.any():
            break
    if np.max(np.abs(system.residual(f))) > start:
        return None
    return f, delta


def overall_statistic(stat, batch: SampleBatch, h) -> float:
    stat = make_statistic(stat) if isinstance(stat, str) else stat
    h = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64)
    a0, b0, a1, b1 = stat.coefficients(batch)
    den = np.mean(a1 + h * b1)
    if abs(den) < ZERO_THRESHOLD:
        raise DegenerateGroupError(None, float(den))
    return float(np.mean(a0 + h * b0) / den)


def solve_projection(kind, stat, batch: SampleBatch, h, config: ProjectionSolverConfig | None = None,
                     c: float | None = None) -> ProjectionResult:
    """Project ``h`` onto the scores whose group statistics all equal ``c``.

    ``c`` defaults to the overall statistic of ``h``. The multipliers are
    updated by damped Newton ascent on the concave dual. A final
    linearized correction makes the returned scores satisfy the
    constraints to rounding error whenever that keeps them in range.
    """
    kind = _kind(kind)
    config = config or ProjectionSolverConfig()
    stat = make_statistic(stat) if isinstance(stat, str) else stat
    h = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64)
    if h.shape != (batch.n,):
        raise ad.ShapeError("solve_projection", h.shape, (batch.n,))
    _check_interior(h)
    if c is None:
        c = overall_statistic(stat, batch, h)
    system = fixed_constraints(stat, batch, c)
    S, alpha, beta = batch.sensitive, system.alpha, system.beta

    present = np.abs(S).sum(axis=0)
    movable = np.abs(S).T @ np.abs(beta)
    for k in range(S.shape[1]):
        if present[k] == 0.0:
            raise DegenerateGroupError(k, 0.0)
        if movable[k] / batch.n < ZERO_THRESHOLD:
            raise ProjectionInfeasibleError(k)

    dual = _Dual(kind, h, S, alpha, beta)
    start = np.zeros(S.shape[1])
    if config.warm_start is not None and np.shape(config.warm_start) == start.shape:
        start = np.asarray(config.warm_start, dtype=np.float64).copy()
    try:
        point = dual.at(start)
    except RootBracketError:
        point = dual.at(np.zeros(S.shape[1]))

    history = [point.value]
    tol = config.residual_tolerance
    iterations = 0
    converged = np.max(np.abs(point.residual)) <= tol
    while not converged and iterations < config.max_iterations:
        step = _solve(dual.neg_hessian(point), point.residual)
        slope = float(point.residual @ step)
        t = 1.0
        accepted = None
        res_norm = np.linalg.norm(point.residual)
        for _ in range(config.max_backtracks):
            try:
                trial = dual.at(point.duals + t * step)
            except RootBracketError:
                t *= 0.5
                continue
            noise = 8 * np.finfo(float).eps * max(1.0, abs(point.value))
            if trial.value >= point.value + ARMIJO * t * slope or (
                trial.value >= point.value - noise and np.linalg.norm(trial.residual) < res_norm
            ):
                accepted = trial
                break
            t *= 0.5
        if accepted is None:
            break
        point = accepted
        history.append(point.value)
        iterations += 1
        converged = np.max(np.abs(point.residual)) <= tol

    f, duals, polished = point.f, point.duals, False
    if config.polish and np.any(point.residual != 0.0):
        restored = _restore_feasibility(kind, point, system)
        if restored is not None:
            f, delta = restored
            duals, polished = point.duals + delta, True

    residuals = system.residual(f)
    return ProjectionResult(
        f_star=f,
        duals=duals,
        residuals=residuals,
        iterations=iterations,
        converged=bool(converged or np.max(np.abs(residuals)) <= tol),
        c=float(c),
        dual_values=history,
        polished=polished,
    )


def projection_fairret(kind, f_star, h) -> Tensor:
    """Mean divergence ``D(f_star || h)`` as a tape function of ``h`` only."""
    kind = _kind(kind)
    h = ad.as_tensor(h)
    f = np.asarray(f_star.data if isinstance(f_star, Tensor) else f_star, dtype=np.float64)
    if f.shape != h.shape:
        raise ad.ShapeError("projection_fairret", f.shape, h.shape)
    _check_interior(h.data)
    if kind is DivergenceKind.SED:
        return ad.mean(2.0 * (f - h) ** 2)
    one_minus_h = 1.0 - h
    if kind is DivergenceKind.KL:
        entropy = xlogy(f, f) + xlogy(1.0 - f, 1.0 - f)
        cross = f * ad.log(h) + (1.0 - f) * ad.log(one_minus_h)
        return ad.mean(entropy - cross)
    m = 0.5 * f + 0.5 * h
    log_m, log_1m = ad.log(m), ad.log(1.0 - m)
    f_part = xlogy(f, f) + xlogy(1.0 - f, 1.0 - f) - f * log_m - (1.0 - f) * log_1m
    h_part = h * ad.log(h) + one_minus_h * ad.log(one_minus_h) - h * log_m - one_minus_h * log_1m
    return ad.mean(0.5 * f_part + 0.5 * h_part)


class Projection:
    """Projection fairret bound to a statistic and divergence.

    Keeps the last solver result in ``last_result`` and, when
    ``warm_start`` is set, reuses the previous multipliers as the next
    starting point.
    """

    divergence: DivergenceKind = DivergenceKind.KL

    def __init__(self, statistic="demographic_parity", divergence=None, max_iterations: int = 10,
                 tolerance: float = 1e-6, warm_start: bool = True):
        self.statistic = make_statistic(statistic) if isinstance(statistic, str) else statistic
        if divergence is not None:
            self.divergence = _kind(divergence)
        self.max_iterations = max_iterations
        self.tolerance = tolerance
        self.warm_start = warm_start
        self.last_result: ProjectionResult | None = None
        self._duals: np.ndarray | None = None

    def reset(self) -> None:
        self._duals = None
        self.last_result = None

    def project(self, batch: SampleBatch, h) -> ProjectionResult:
        config = ProjectionSolverConfig(
            max_iterations=self.max_iterations,
            residual_tolerance=self.tolerance,
            warm_start=self._duals if self.warm_start else None,
        )
        result = solve_projection(self.divergence, self.statistic, batch, h, config)
        self.last_result = result
        if self.warm_start:
            self._duals = result.duals
        return result

    def __call__(self, batch: SampleBatch, h) -> Tensor:
        h = ad.as_tensor(h)
        result = self.project(batch, h.data)
        return projection_fairret(self.divergence, result.f_star, h)

    def __repr__(self):
        return f"{type(self).__name__}({self.statistic.name!r}, max_iterations={self.max_iterations})"


class KLProjection(Projection):
    divergence = DivergenceKind.KL


class JSProjection(Projection):
    divergence = DivergenceKind.JS


class SEDProjection(Projection):
    divergence = DivergenceKind.SED
