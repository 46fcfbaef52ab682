"""Differentiable fairness regularization terms for probabilistic classifiers."""

from .autodiff import Tape, Tensor, backward, finite_difference_check, grad
from .data import DatasetSchema, SyntheticSpec, batches, load_dataset, load_schema, split, synthesize
from .harness import GridSpec, auroc, batch_size_study, ellipse_stats, max_violation, run_grid
from .model import TrainConfig, forward, init_mlp, make_fairret, train
from .projection import (
    JSProjection,
    KLProjection,
    ProjectionSolverConfig,
    SEDProjection,
    divergence,
    projection_fairret,
    solve_projection,
)
from .statistics import SampleBatch, fixed_constraints, group_statistics, make_statistic, violation
from .violation import Norm, SmoothMax, norm_fairret, smoothmax_fairret

__version__ = "0.1.0"
