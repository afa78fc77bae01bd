import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from conftest import SMALL, finite_difference, random_bag, random_bags
from tvmerge import nn
from tvmerge.errors import NumericalError, StructureError
from tvmerge.nn import (
    BLOCK_ORDER, AdamState, Bag, CosineSchedule, ModelWeights, NetConfig, TrainConfig,
    adamw_step, backward, embed_instances, fit, forward, full_batch_gradient, gated_attention,
    gradient_descent_step, init_weights, mean_loss, train_cancer_specific,
)
from tvmerge.survival import SurvLabel, nll_loss
from tvmerge.synthdata import TaskFamilyConfig, gen_task_family


def oracle_forward(w, X):
    """Straight-line re-derivation of the gated-attention MIL forward."""
    relu = lambda v: np.maximum(v, 0)  # noqa: E731
    H = relu(relu(X @ w["emb.W1"].T + w["emb.b1"]) @ w["emb.W2"].T + w["emb.b2"])
    scores = np.array([
        w["attn.w"] @ (np.tanh(w["attn.V"] @ h) * expit(w["attn.U"] @ h)) for h in H
    ])
    a = np.exp(scores - scores.max())
    a /= a.sum()
    z = sum(ai * h for ai, h in zip(a, H))
    return w["head.W"] @ z + w["head.b"], a


def test_block_layout():
    cfg = NetConfig()
    shapes = cfg.block_shapes()
    assert tuple(shapes) == BLOCK_ORDER
    assert cfg.n_params == sum(math.prod(s) for s in shapes.values())
    with pytest.raises(StructureError):
        NetConfig(d_in=0)


def test_init_deterministic_and_biases_zero():
    a, b, c = init_weights(SMALL, 3), init_weights(SMALL, 3), init_weights(SMALL, 4)
    assert a.equals(b)
    assert not a.equals(c)
    for name in ("emb.b1", "emb.b2", "head.b"):
        assert not np.any(a[name])
    bound = 1 / math.sqrt(SMALL.d_in)
    assert np.abs(a["emb.W1"]).max() <= bound


def test_param_blocks_flat_roundtrip():
    w = init_weights(SMALL, 1)
    back = ModelWeights.from_flat(SMALL, w.flat())
    assert back.equals(w)
    with pytest.raises(StructureError):
        ModelWeights.from_flat(SMALL, np.zeros(3))


def test_param_blocks_mismatch():
    w = init_weights(SMALL, 1)
    other = init_weights(NetConfig(d_in=5, d_embed=7, d_attn=4, n_bins=3), 1)
    with pytest.raises(StructureError):
        w.check_matched(other)


def test_embed_zero_weights_and_hand_case():
    zero = ModelWeights.zeros(SMALL)
    assert not np.any(embed_instances(zero, np.ones((3, SMALL.d_in))))
    cfg = NetConfig(1, 1, 1, 1)
    w = ModelWeights.zeros(cfg)
    w["emb.W1"][:] = 1.0
    w["emb.W2"][:] = 1.0
    assert embed_instances(w, np.array([[2.0]]))[0, 0] == 2.0


def test_embed_shape_error():
    with pytest.raises(StructureError):
        embed_instances(init_weights(SMALL, 0), np.ones((2, SMALL.d_in + 1)))


def test_attention_single_and_duplicated_instances():
    w = init_weights(SMALL, 2)
    h = np.abs(np.random.default_rng(0).standard_normal((1, SMALL.d_embed)))
    z, a = gated_attention(w, h)
    np.testing.assert_array_equal(a, [1.0])
    np.testing.assert_allclose(z, h[0])
    z, a = gated_attention(w, np.vstack([h, h]))
    np.testing.assert_allclose(a, [0.5, 0.5])


def test_forward_matches_oracle():
    rng = np.random.default_rng(7)
    w = init_weights(SMALL, 7)
    X = rng.standard_normal((6, SMALL.d_in))
    logits, a = forward(w, X)
    ref_logits, ref_a = oracle_forward(w, X)
    np.testing.assert_allclose(logits, ref_logits, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(a, ref_a, rtol=1e-12)


def test_forward_zero_head_and_hand_head():
    w = init_weights(SMALL, 0)
    w["head.W"][:] = 0.0
    assert not np.any(forward(w, np.ones((2, SMALL.d_in)))[0])
    cfg = NetConfig(2, 2, 1, 1)
    w = ModelWeights.zeros(cfg)
    w["emb.W1"][:] = np.eye(2)
    w["emb.W2"][:] = np.eye(2)
    w["head.W"][:] = [[2.0, -1.0]]
    w["head.b"][:] = 0.5
    logits, _ = forward(w, np.array([[1.0, 3.0]]))
    assert logits[0] == pytest.approx(2.0 * 1 - 3.0 + 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_is_probability_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    w = init_weights(SMALL, seed)
    X = rng.standard_normal((int(rng.integers(1, 12)), SMALL.d_in)) * 3
    logits, a = forward(w, X)
    assert np.all(a >= 0) and abs(a.sum() - 1.0) < 1e-12
    perm = rng.permutation(X.shape[0])
    logits_p, a_p = forward(w, X[perm])
    np.testing.assert_allclose(logits_p, logits, atol=1e-10)
    np.testing.assert_allclose(a_p, a[perm], atol=1e-12)


def test_backward_constant_loss_zero_grads():
    w = init_weights(SMALL, 0)
    bag = random_bag(np.random.default_rng(0), SMALL)
    loss, g = backward(w, bag, lambda z: (1.5, np.zeros_like(z)))
    assert loss == 1.5
    assert not np.any(g.flat())


def test_backward_linear_head_slope():
    # with loss = sum(logits), d loss / d head.b is exactly one per bin
    w = init_weights(SMALL, 0)
    bag = random_bag(np.random.default_rng(0), SMALL)
    _, g = backward(w, bag, lambda z: (float(z.sum()), np.ones_like(z)))
    np.testing.assert_array_equal(g["head.b"], np.ones(SMALL.n_bins))


def test_backward_nonfinite_raises():
    w = init_weights(SMALL, 0)
    bag = random_bag(np.random.default_rng(0), SMALL)
    with pytest.raises(NumericalError):
        backward(w, bag, lambda z: (float("nan"), np.zeros_like(z)))


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    w = init_weights(SMALL, seed)
    w = ModelWeights.from_flat(SMALL, w.flat() + 0.1 * rng.standard_normal(SMALL.n_params))
    bag = random_bag(rng, SMALL, n=5)
    _, g = backward(w, bag)
    gf = g.flat()
    f = lambda v: nll_loss(forward(ModelWeights.from_flat(SMALL, v), bag)[0], bag.label)  # noqa: E731
    for i in range(SMALL.n_params):
        fd = finite_difference(f, w.flat(), i)
        assert abs(gf[i] - fd) / max(1.0, abs(fd)) < 1e-7


def test_full_batch_gradient_is_weighted_sum():
    rng = np.random.default_rng(1)
    w = init_weights(SMALL, 1)
    bags = random_bags(rng, SMALL, 4)
    c = np.array([0.1, 0.2, 0.3, 0.4])
    loss, g = full_batch_gradient(w, bags, c)
    parts = [backward(w, b) for b in bags]
    assert loss == pytest.approx(sum(ci * p[0] for ci, p in zip(c, parts)), rel=1e-14)
    np.testing.assert_allclose(g.flat(), sum(ci * p[1].flat() for ci, p in zip(c, parts)), atol=1e-15)
    step = gradient_descent_step(w, bags, 0.5, c)
    np.testing.assert_allclose(step.flat(), w.flat() - 0.5 * g.flat(), atol=1e-15)


# ---------------------------------------------------------------------------
# Optimizer


def test_adamw_zero_grads_no_decay_unchanged():
    p = np.array([1.0, -2.0])
    new, _ = adamw_step(p, np.zeros(2), AdamState.zeros(2), 1, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(new, p)


def test_adamw_first_step_hand_value():
    eta, eps = 1e-3, 1e-8
    new, state = adamw_step(np.array([0.0]), np.array([1.0]), AdamState.zeros(1), 1, lr=eta, eps=eps)
    # bias-corrected m_hat = 1, v_hat = 1
    assert new[0] == pytest.approx(-eta / (1 + eps), rel=1e-15)
    assert state.m[0] == pytest.approx(0.1) and state.v[0] == pytest.approx(0.001)


def test_adamw_decoupled_decay():
    new, _ = adamw_step(np.array([2.0]), np.array([0.0]), AdamState.zeros(1), 1, lr=0.1, weight_decay=0.5)
    assert new[0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_two_steps_against_recurrence():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    p, state = np.array([0.5]), AdamState.zeros(1)
    m = v = 0.0
    ref = 0.5
    for t, g in enumerate([0.3, -0.7], start=1):
        p, state = adamw_step(p, np.array([g]), state, t, lr, weight_decay=0.1)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref * (1 - lr * 0.1) - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    assert p[0] == pytest.approx(ref, rel=1e-14)


def test_schedule_warmup_and_endpoint():
    s = CosineSchedule(1e-3, 10, 100)
    assert s(1) == pytest.approx(1e-4)
    assert s(10) == pytest.approx(1e-3)
    assert s(55) == pytest.approx(0.5e-3)
    assert abs(s(100)) < 1e-12
    assert abs(CosineSchedule(1e-3, 0, 5)(5)) < 1e-12


def test_fit_accumulates_mean_gradient():
    # quadratic loss 0.5 (p - t_i)^2 with one accumulation group is a mean-gradient step
    targets = np.array([1.0, 3.0])
    cfg = TrainConfig(epochs=1, learning_rate=0.1, warmup_epochs=0, weight_decay=0.0,
                      accumulation_bags=2)
    p, losses = fit(np.array([0.0]), 2, lambda p, i: (0.5 * (p[0] - targets[i]) ** 2, p - targets[i]),
                    cfg, np.random.default_rng(0))
    # step 1 of a one-step cosine schedule with no warmup runs at lr 0
    assert p[0] == pytest.approx(0.0, abs=1e-12)
    assert losses == [pytest.approx(0.5 * (1 + 9) / 2)]
    cfg = TrainConfig(epochs=2, learning_rate=0.1, warmup_epochs=1, weight_decay=0.0, accumulation_bags=2)
    p, _ = fit(np.array([0.0]), 2, lambda p, i: (0.0, p - targets[i]), cfg, np.random.default_rng(0))
    # warmup step at full lr: AdamW first step moves by lr * sign(mean grad)
    assert p[0] == pytest.approx(0.1 / (1 + 1e-8 / 2.0), rel=1e-6)


def test_train_config_validation():
    with pytest.raises(StructureError):
        TrainConfig(epochs=-1)
    with pytest.raises(StructureError):
        TrainConfig(epochs=2, warmup_epochs=2)
    TrainConfig(epochs=0)


# ---------------------------------------------------------------------------
# Training


@pytest.fixture(scope="module")
def planted_task():
    return gen_task_family(TaskFamilyConfig(n_tasks=1, bags_per_task=80, seed=3))[0]


def test_train_zero_epochs_returns_init(planted_task):
    init = init_weights(NetConfig(), 5)
    w, log = train_cancer_specific(planted_task, NetConfig(), TrainConfig(epochs=0), init=init)
    assert w.equals(init) and w is not init
    assert log.epoch_losses == []


def test_train_deterministic_and_decreases_loss(planted_task):
    cfg = TrainConfig(epochs=4, learning_rate=1e-3, seed=2)
    w1, log1 = train_cancer_specific(planted_task, NetConfig(), cfg)
    w2, log2 = train_cancer_specific(planted_task, NetConfig(), cfg)
    assert w1.equals(w2) and log1.epoch_losses == log2.epoch_losses
    init = init_weights(NetConfig(), 2)
    assert mean_loss(w1, planted_task.bags) < mean_loss(init, planted_task.bags)


def test_train_all_censored_flags_warning():
    rng = np.random.default_rng(0)
    bags = [random_bag(rng, SMALL, label=SurvLabel(1, 0)) for _ in range(5)]
    _, log = train_cancer_specific(bags, SMALL, TrainConfig(epochs=1, warmup_epochs=0))
    assert "all_censored" in log.warnings


def test_forward_hook_counts_passes():
    calls = []
    nn.forward_hooks.append(lambda w, X: calls.append(X.shape[0]))
    try:
        bag = random_bag(np.random.default_rng(0), SMALL, n=3)
        forward(init_weights(SMALL, 0), bag)
        backward(init_weights(SMALL, 0), bag)
    finally:
        nn.forward_hooks.pop()
    assert calls == [3, 3]


def test_bag_validation():
    with pytest.raises(StructureError):
        Bag(np.zeros((0, 3)), SurvLabel(0, 1))
    with pytest.raises(StructureError):
        Bag(np.zeros(3), SurvLabel(0, 1))
