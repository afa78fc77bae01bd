import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import SMALL, finite_difference, perturbed_model, random_bags
from tvmerge.errors import StructureError
from tvmerge.nn import TrainConfig, forward, init_weights, mean_loss
from tvmerge.steph import FrozenModelSet, MergeConfig, predict
from tvmerge.baselines import (
    ABLATION_TAGS, adamerging_grad, adamerging_merge, adamerging_train, best_source_finetune,
    ablation_setup, evaluate_model, finetune_head, model_average, run_ablation,
)
from tvmerge.taskvec import task_vector


def _models(seed, count):
    rng = np.random.default_rng(seed)
    m0 = init_weights(SMALL, seed)
    return m0, [perturbed_model(m0, rng) for _ in range(count)]


def test_model_average_identity_and_cancellation():
    m0, (m,) = _models(0, 1)
    np.testing.assert_array_equal(model_average([m, m]).flat(), m.flat())
    tau = task_vector(m, m0).flat()
    plus = m0.from_flat(SMALL, m0.flat() + tau)
    minus = m0.from_flat(SMALL, m0.flat() - tau)
    np.testing.assert_allclose(model_average([plus, minus]).flat(), m0.flat(), atol=1e-15)
    with pytest.raises(StructureError):
        model_average([])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_model_average_elementwise_and_permutation(seed, count):
    _, models = _models(seed, count)
    avg = model_average(models).flat()
    np.testing.assert_allclose(avg, np.mean([m.flat() for m in models], axis=0), rtol=1e-14, atol=1e-15)
    perm = np.random.default_rng(seed).permutation(count)
    np.testing.assert_allclose(model_average([models[i] for i in perm]).flat(), avg, atol=1e-15)


@pytest.fixture(scope="module")
def pool():
    m0, (target, *sources) = _models(3, 4)
    return FrozenModelSet.from_models(m0, target, sources), target, sources


def test_adamerging_merge_composition(pool):
    frozen, target, sources = pool
    np.testing.assert_allclose(adamerging_merge(frozen, 1.0, [0, 0, 0]).flat(), target.flat(), atol=1e-14)
    np.testing.assert_allclose(adamerging_merge(frozen, 0.0, [0, 1, 0]).flat(), sources[1].flat(), atol=1e-14)


def test_adamerging_zero_epochs_keeps_uniform_init(pool):
    frozen, _, _ = pool
    bags = random_bags(np.random.default_rng(0), SMALL, 5)
    w_t, w_s, merged = adamerging_train(frozen, bags, TrainConfig(epochs=0))
    assert w_t == 0.25 and np.all(w_s == 0.25)
    np.testing.assert_array_equal(merged.flat(), adamerging_merge(frozen, 0.25, [0.25] * 3).flat())


def test_adamerging_gradient_matches_finite_differences(pool):
    frozen, _, _ = pool
    bag = random_bags(np.random.default_rng(1), SMALL, 1)[0]
    coeffs = np.array([0.4, 0.1, -0.2, 0.3])
    _, grad = adamerging_grad(frozen, coeffs, bag)

    def loss(c):
        return adamerging_grad(frozen, c, bag)[0]

    for i in range(coeffs.size):
        fd = finite_difference(loss, coeffs, i)
        assert abs(grad[i] - fd) / max(1.0, abs(fd)) < 1e-6


def test_finetune_head_only_touches_head():
    m0, (m,) = _models(5, 1)
    bags = random_bags(np.random.default_rng(5), SMALL, 24)
    cfg = TrainConfig(epochs=4, learning_rate=1e-2, accumulation_bags=4, warmup_epochs=0)
    tuned = finetune_head(m, bags, cfg)
    for name in m.blocks:
        if name.startswith("head."):
            assert not np.array_equal(tuned[name], m[name])
        else:
            np.testing.assert_array_equal(tuned[name], m[name])
    assert mean_loss(tuned, bags) < mean_loss(m, bags)
    unchanged = finetune_head(m, bags, TrainConfig(epochs=0))
    np.testing.assert_array_equal(unchanged.flat(), m.flat())


def test_best_source_finetune_picks_lowest_training_loss():
    _, sources = _models(6, 3)
    bags = random_bags(np.random.default_rng(6), SMALL, 12)
    cfg = TrainConfig(epochs=2, learning_rate=1e-2, accumulation_bags=4, warmup_epochs=0)
    best, model = best_source_finetune(sources, bags, cfg)
    losses = [mean_loss(finetune_head(s, bags, cfg), bags) for s in sources]
    assert best == int(np.argmin(losses))
    assert mean_loss(model, bags) == min(losses)


def test_evaluate_model_matches_manual_loss():
    _, (m,) = _models(7, 1)
    bags = random_bags(np.random.default_rng(7), SMALL, 15)
    ev = evaluate_model(m, bags)
    assert ev.loss == pytest.approx(mean_loss(m, bags), rel=1e-12)
    assert 0.0 <= ev.c_index <= 1.0


def test_ablation_tags_and_unknown_variant(pool):
    frozen, _, _ = pool
    assert len(ABLATION_TAGS) == 7 and "full" in ABLATION_TAGS
    with pytest.raises(StructureError):
        ablation_setup("bogus", frozen, MergeConfig(3, 2), 0)


def test_ablation_variant_configuration(pool):
    frozen, _, _ = pool
    mc = MergeConfig(3, 2, d_hyper=6)
    net, p, cfg = ablation_setup("fix_lambda_0_with_target_in_sources", frozen, mc, 0)
    assert p.m == 4 and p.tau_sources[-1] is frozen.tau_t and net.lambda_mode == "fixed"
    net, p, cfg = ablation_setup("dense_no_sparsity", frozen, mc, 0)
    assert cfg.k == 3
    assert ablation_setup("param_lambda", frozen, mc, 0)[0].lambda_mode == "param"
    assert ablation_setup("param_w", frozen, mc, 0)[0].w_mode == "param"
    assert np.all(ablation_setup("fix_lambda_1", frozen, mc, 0)[0].fixed_lambda == 1.0)


def test_full_equals_dense_when_k_is_m(pool):
    frozen, _, _ = pool
    rng = np.random.default_rng(8)
    train, test = random_bags(rng, SMALL, 10), random_bags(rng, SMALL, 6)
    cfg = TrainConfig(epochs=2, learning_rate=1e-2, accumulation_bags=4, seed=3)
    mc = MergeConfig(3, 3, d_hyper=6)
    full = run_ablation("full", frozen, train, test, mc, cfg)
    dense = run_ablation("dense_no_sparsity", frozen, train, test, mc, cfg)
    assert full.test == dense.test and full.trajectory.rows == dense.trajectory.rows


def test_fix_lambda_1_single_source_unit_weight_is_target():
    m0, (target, source) = _models(9, 2)
    frozen = FrozenModelSet.from_models(m0, target, [source])
    net, pool_, cfg = ablation_setup("fix_lambda_1", frozen, MergeConfig(1, 1, d_hyper=4), 0)
    # w_init = 1/k = 1; with the instance-dependent part of the w head removed
    # the merged model is exactly M0 + tau_t
    net.params["w.W"][:] = 0.0
    bag = random_bags(np.random.default_rng(9), SMALL, 1)[0]
    np.testing.assert_allclose(predict(net, pool_, bag, 1)[0], forward(target, bag)[0], atol=1e-12)
