"""Fairrets that penalize the violation vector directly."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .statistics import SampleBatch, ViolationVector, make_statistic, violation

NORM_ORDERS = (1, 2, math.inf)


def _values(v) -> Tensor:
    if isinstance(v, ViolationVector):
        return v.values
    return ad.as_tensor(v)


def norm_fairret(v, order=1) -> Tensor:
    """Vector norm of the violation (orders 1, 2 or infinity)."""
    x = _values(v)
    if order == 1:
        return ad.sum(ad.absolute(x))
    if order == 2:
        return ad.power(ad.sum(ad.power(x, 2)), 0.5)
    if order in (math.inf, "inf", np.inf):
        return ad.maximum(ad.absolute(x))
    raise ValueError(f"unsupported norm order {order!r}")


def smoothmax_fairret(v) -> Tensor:
    """log-sum-exp of the violation shifted by ``log d_s`` so that it is zero at fairness."""
    x = _values(v)
    return ad.logsumexp(x) - math.log(x.size)


class Norm:
    """Norm fairret bound to a statistic: ``Norm("dp", order=2)(batch, h)``."""

    def __init__(self, statistic="demographic_parity", order=1):
        if order not in NORM_ORDERS and order != "inf":
            raise ValueError(f"unsupported norm order {order!r}")
        self.statistic = make_statistic(statistic) if isinstance(statistic, str) else statistic
        self.order = math.inf if order == "inf" else order

    def __call__(self, batch: SampleBatch, h) -> Tensor:
        return norm_fairret(violation(self.statistic, batch, h), self.order)

    def __repr__(self):
        return f"Norm({self.statistic.name!r}, order={self.order})"


class SmoothMax:
    def __init__(self, statistic="demographic_parity"):
        self.statistic = make_statistic(statistic) if isinstance(statistic, str) else statistic

    def __call__(self, batch: SampleBatch, h) -> Tensor:
        return smoothmax_fairret(violation(self.statistic, batch, h))

    def __repr__(self):
        return f"SmoothMax({self.statistic.name!r})"
