import math

import numpy as np
import pytest

from fairgrad import autodiff as ad
from fairgrad.autodiff import NonFiniteError, Tape, Tensor
from fairgrad.data import SyntheticSpec, split, synthesize
from fairgrad.model import (
    AdamState,
    MlpParams,
    TrainConfig,
    adam_step,
    bce_loss,
    forward,
    init_mlp,
    make_fairret,
    objective,
    train,
)
from fairgrad.projection import projection_fairret, solve_projection
from fairgrad.statistics import SampleBatch, violation
from fairgrad.violation import SmoothMax

SMALL = dict(hidden_sizes=(16, 8), epochs=30, warmup_epochs=5, batch_size=512, learning_rate=0.005)


def linear_params(w, b=0.0):
    return MlpParams([np.asarray(w, dtype=float), np.asarray(float(b))], ())


def score_batch(h, groups, labels=None):
    """Batch whose single feature is logit(h), so a unit linear model reproduces h."""
    h = np.asarray(h, dtype=float)
    n = h.size
    labels = np.zeros(n) if labels is None else labels
    return SampleBatch(np.log(h / (1 - h))[:, None], labels, np.eye(max(groups) + 1)[groups], partition=True)


def test_forward_examples():
    params = init_mlp(3, (4,), seed=0)
    zero = MlpParams([np.zeros_like(a) for a in params.arrays], params.hidden_sizes)
    np.testing.assert_array_equal(forward(zero, np.ones((5, 3))).numpy(), 0.5)
    assert forward(linear_params([1.0]), np.zeros((1, 1))).numpy()[0] == 0.5
    logits = np.array([[-0.3], [0.2]])
    sharp = forward(linear_params([1.0]), logits, surrogate_scale=500.0).numpy()
    np.testing.assert_allclose(sharp, [0.0, 1.0], atol=1e-12)
    with pytest.raises(ad.ShapeError):
        forward(params, np.ones((5, 2)))
    with pytest.raises(ValueError):
        forward(params, np.ones((5, 3)), surrogate_scale=0.0)


def test_outputs_stay_interior():
    params = linear_params([1e6])
    x = np.random.default_rng(0).normal(size=(100_000, 1)) * 1e3
    p = forward(params, x).numpy()
    assert np.all((p > 0) & (p < 1))
    y = (x[:, 0] > 0).astype(float)
    assert np.isfinite(bce_loss(p, 1 - y).item())


def test_bce_examples():
    assert bce_loss([0.5, 0.5], [1, 0]).item() == pytest.approx(math.log(2))
    assert bce_loss([0.9, 0.2], [1, 0]).item() == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2)
    assert bce_loss([0.16425], [0]).item() > 0
    assert bce_loss([1 - 1e-12, 1e-12], [1, 0]).item() < 1e-11


def test_objective_examples():
    b = score_batch([0.8, 0.8, 0.2, 0.2], [0, 0, 1, 1], labels=np.array([1, 0, 1, 0.0]))
    params = linear_params([1.0])
    bce = bce_loss(forward(params, b.features), b.labels).item()
    cfg0 = TrainConfig(strength=0.0, fairret="smoothmax")
    assert objective(b, params, cfg0, SmoothMax("dp")).total.item() == bce
    cfg2 = TrainConfig(strength=2.0, fairret="smoothmax")
    assert objective(b, params, cfg2, SmoothMax("dp")).total.item() == pytest.approx(bce + 1.2)
    assert objective(b, params, cfg2, SmoothMax("dp"), warmup=True).total.item() == bce
    fair = score_batch([0.3, 0.3, 0.3, 0.3], [0, 0, 1, 1])
    cfg1 = TrainConfig(strength=1.0)
    fair_bce = bce_loss(forward(params, fair.features), fair.labels).item()
    assert objective(fair, params, cfg1, make_fairret("kl")).total.item() == pytest.approx(fair_bce, abs=1e-15)


def test_objective_skips_degenerate_batches():
    b = score_batch([0.8, 0.7], [0, 0])
    b = SampleBatch(b.features, b.labels, np.array([[1.0, 0.0], [1.0, 0.0]]))
    terms = objective(b, linear_params([1.0]), TrainConfig(strength=1.0), SmoothMax("dp"))
    assert terms.skipped and terms.fairret is None


def test_adam_examples():
    p = [np.array([1.0, -2.0]), np.array(0.5)]
    state = AdamState.zeros_like(p)
    out = adam_step(p, [np.zeros(2), np.array(0.0)], state)
    np.testing.assert_array_equal(out[0], p[0])
    state = AdamState.zeros_like(p)
    g = [np.array([0.3, -4.0]), np.array(1e-3)]
    out = adam_step(p, g, state, learning_rate=0.001)
    np.testing.assert_allclose(out[0] - p[0], [-0.001, 0.001], rtol=1e-4)
    s1, s2 = AdamState.zeros_like(p), AdamState.zeros_like(p)
    assert all(np.array_equal(a, b) for a, b in zip(adam_step(p, g, s1), adam_step(p, g, s2)))
    with pytest.raises(NonFiniteError):
        adam_step(p, [np.array([np.nan, 0.0]), np.array(0.0)], AdamState.zeros_like(p))
    with pytest.raises(ValueError):
        adam_step(p, g[:1], AdamState.zeros_like(p))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(strength=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_epochs=5, epochs=3)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 0.1})
    cfg = TrainConfig.from_dict({"strength": 2.0, "hidden_sizes": [8]})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        make_fairret("norm3")


def _objective_value(data, arrays, cfg, fairret):
    return objective(data, [Tensor(a) for a in arrays], cfg, fairret).total.item()


class FrozenKL:
    """KL projection fairret with the projection computed once and held fixed."""

    def __init__(self, f_star):
        self.f_star = f_star

    def __call__(self, batch, h):
        return projection_fairret("kl", self.f_star, h)


@pytest.mark.parametrize("which", ["smoothmax", "frozen_kl"])
def test_end_to_end_gradient_matches_finite_differences(which):
    rng = np.random.default_rng(0)
    data = synthesize(SyntheticSpec.with_gap(0.3, n=64, d_x=3, seed=0))
    params = init_mlp(3, (6, 4), seed=1)
    cfg = TrainConfig(strength=1.5, hidden_sizes=(6, 4))
    if which == "smoothmax":
        fairret = SmoothMax("dp")
    else:
        h0 = forward(params, data.features).numpy()
        fairret = FrozenKL(solve_projection("kl", "dp", data, h0).f_star)
    leaves = params.leaves()
    with Tape() as tape:
        total = objective(data, leaves, cfg, fairret).total
    grads = tape.gradient(total, leaves)
    step = 1e-5
    for layer in (0, 2, 4):
        shape = params.arrays[layer].shape
        index = rng.choice(params.arrays[layer].size, min(5, params.arrays[layer].size), replace=False)
        numeric = []
        for i in index:
            up, down = params.copy().arrays, params.copy().arrays
            up[layer].reshape(-1)[i] += step
            down[layer].reshape(-1)[i] -= step
            numeric.append((_objective_value(data, up, cfg, fairret)
                            - _objective_value(data, down, cfg, fairret)) / (2 * step))
        numeric = np.array(numeric)
        tape_g = grads[layer].reshape(-1)[index]
        assert np.max(np.abs(tape_g - numeric)) / np.max(np.abs(numeric)) < 1e-3, shape


def test_fairret_gradient_factors_through_scores():
    data = synthesize(SyntheticSpec.with_gap(0.3, n=50, d_x=3, seed=4))
    params = init_mlp(3, (5,), seed=2)
    fairret = SmoothMax("dp")
    leaves = params.leaves()
    with Tape() as tape:
        h = forward(leaves, data.features)
        r = fairret(data, h)
    g_theta = tape.gradient(r, leaves)
    _, g_h = ad.grad(lambda t: fairret(data, t), h.numpy())
    for weights, expected in ((g_h, g_theta), (np.zeros_like(g_h), None)):
        leaves = params.leaves()
        with Tape() as tape:
            surrogate = ad.sum(forward(leaves, data.features) * weights)
        got = tape.gradient(surrogate, leaves)
        for i, g in enumerate(got):
            if expected is None:
                np.testing.assert_array_equal(g, 0.0)
            else:
                np.testing.assert_allclose(g, expected[i], atol=1e-12)


@pytest.fixture(scope="module")
def biased():
    return split(synthesize(SyntheticSpec.with_gap(0.3, n=3000, d_x=4, group_shift=4.0, noise=0.5, seed=5)), 0.8, 0)


def test_unconstrained_training_keeps_bias(biased):
    train_set, test_set = biased
    result = train(train_set, TrainConfig(strength=0.0, **SMALL))
    assert violation("dp", test_set, result.predict(test_set.features)).numpy().max() > 0.1
    assert len(result.history) == SMALL["epochs"]


def test_training_is_deterministic(biased):
    train_set, _ = biased
    cfg = TrainConfig(strength=1.0, fairret="kl", **{**SMALL, "epochs": 6, "warmup_epochs": 2})
    a, b = train(train_set, cfg), train(train_set, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.params.arrays, b.params.arrays))
    assert a.history == b.history


def test_strong_smoothmax_reduces_violation(biased):
    train_set, _ = biased
    base = train(train_set, TrainConfig(strength=0.0, **SMALL))
    fair = train(train_set, TrainConfig(strength=10.0, fairret="smoothmax", **SMALL))
    v0 = violation("dp", train_set, base.predict(train_set.features)).numpy().max()
    v1 = violation("dp", train_set, fair.predict(train_set.features)).numpy().max()
    assert v1 < v0


def test_warmup_skips_fairret(biased):
    train_set, _ = biased
    cfg = TrainConfig(strength=1.0, fairret="kl", **{**SMALL, "epochs": 3, "warmup_epochs": 2})
    result = train(train_set, cfg)
    assert [r["fairret"] is None for r in result.history] == [True, True, False]
    assert result.projection_iterations
