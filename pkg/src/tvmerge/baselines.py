"""Comparison methods and STEPH ablation variants."""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import seeding
from .errors import StructureError
from .nn import (
    BLOCK_ORDER, Bag, ModelWeights, TrainConfig, backward, fit, forward, mean_loss,
)
from .steph import (
    FrozenModelSet, HyperNet, MergeConfig, TrajectoryLog, init_hypernet, predict, train_steph,
)
from .survival import concordance_index, nll_loss_and_grad, risk_from_hazards

ABLATION_TAGS = (
    "fix_lambda_0",
    "fix_lambda_0_with_target_in_sources",
    "fix_lambda_1",
    "param_lambda",
    "param_w",
    "dense_no_sparsity",
    "full",
)


def model_average(models: Sequence[ModelWeights]) -> ModelWeights:
    if not models:
        raise StructureError("nothing to average")
    for mdl in models[1:]:
        models[0].check_matched(mdl)
    return ModelWeights(
        models[0].config,
        {n: np.mean([mdl[n] for mdl in models], axis=0) for n in BLOCK_ORDER},
    )


def adamerging_merge(frozen: FrozenModelSet, w_t: float, w_s: Sequence[float]) -> ModelWeights:
    """M0 + w_t tau_t + sum_i w_s_i tau_s_i."""
    m0, tt, ts = frozen._flat
    vec = m0 + w_t * tt
    if len(w_s):
        vec = vec + np.asarray(w_s, dtype=np.float64) @ ts
    return ModelWeights.from_flat(frozen.m_zero.config, vec)


def adamerging_grad(frozen: FrozenModelSet, coeffs: np.ndarray, bag: Bag) -> tuple[float, np.ndarray]:
    """Loss and d loss / d (w_t, w_s_1..w_s_m) for one bag."""
    merged = adamerging_merge(frozen, coeffs[0], coeffs[1:])
    loss, g = backward(merged, bag)
    _, tt, ts = frozen._flat
    gf = g.flat()
    return loss, np.concatenate([[gf @ tt], ts @ gf])


def adamerging_train(
    frozen: FrozenModelSet, bags: Sequence[Bag], train_config: TrainConfig
) -> tuple[float, np.ndarray, ModelWeights]:
    """Input-independent merge coefficients trained on the survival loss."""
    bags = list(getattr(bags, "bags", bags))
    coeffs = np.full(frozen.m + 1, 1.0 / (frozen.m + 1))
    coeffs, _ = fit(
        coeffs, len(bags), lambda c, i: adamerging_grad(frozen, c, bags[i]), train_config,
        seeding.stream(train_config.seed, "adamerging-shuffle"),
    )
    return float(coeffs[0]), coeffs[1:], adamerging_merge(frozen, coeffs[0], coeffs[1:])


def finetune_head(model: ModelWeights, bags: Sequence[Bag], train_config: TrainConfig) -> ModelWeights:
    """Train only ``head.W`` and ``head.b``; every other block is left untouched."""
    bags = list(getattr(bags, "bags", bags))
    names = ("head.W", "head.b")
    shapes = [model[n].shape for n in names]
    split = model["head.W"].size

    def with_head(vec):
        blocks = dict(model.blocks)
        blocks["head.W"] = vec[:split].reshape(shapes[0])
        blocks["head.b"] = vec[split:].reshape(shapes[1])
        return ModelWeights(model.config, blocks)

    def loss_and_grad(vec, i):
        loss, g = backward(with_head(vec), bags[i])
        return loss, np.concatenate([g["head.W"].ravel(), g["head.b"]])

    start = np.concatenate([model[n].ravel() for n in names])
    vec, _ = fit(
        start, len(bags), loss_and_grad, train_config,
        seeding.stream(train_config.seed, "finetune-shuffle"),
    )
    if train_config.epochs == 0:
        return model.copy()
    return with_head(vec)


@dataclass(frozen=True)
class Evaluation:
    c_index: float
    loss: float


def evaluate_model(model: ModelWeights, bags: Sequence[Bag]) -> Evaluation:
    logits = [forward(model, b)[0] for b in bags]
    return _evaluation(logits, bags)


def evaluate_steph(net: HyperNet, frozen: FrozenModelSet, bags: Sequence[Bag], k: int) -> Evaluation:
    logits = [predict(net, frozen, b, k)[0] for b in bags]
    return _evaluation(logits, bags)


def _evaluation(logits, bags) -> Evaluation:
    risks = [risk_from_hazards(z) for z in logits]
    labels = [b.label for b in bags]
    loss = float(np.mean([nll_loss_and_grad(z, lab)[0] for z, lab in zip(logits, labels)]))
    return Evaluation(concordance_index(risks, labels), loss)


@dataclass
class AblationResult:
    variant: str
    train: Evaluation
    test: Evaluation
    net: HyperNet
    frozen: FrozenModelSet
    k: int
    trajectory: TrajectoryLog


def ablation_setup(
    variant: str, frozen: FrozenModelSet, merge_config: MergeConfig, seed: int
) -> tuple[HyperNet, FrozenModelSet, MergeConfig]:
    """Hypernet, source pool and merge config realizing one ablation variant."""
    if variant not in ABLATION_TAGS:
        raise StructureError(f"unknown ablation variant {variant!r}; choose from {ABLATION_TAGS}")
    if variant == "fix_lambda_0_with_target_in_sources":
        frozen = FrozenModelSet(frozen.m_zero, frozen.tau_t, frozen.tau_sources + (frozen.tau_t,))
        merge_config = MergeConfig(
            frozen.m, merge_config.k, merge_config.beta, merge_config.gamma, merge_config.d_hyper
        )
    elif variant == "dense_no_sparsity":
        merge_config = MergeConfig(
            frozen.m, frozen.m, merge_config.beta, merge_config.gamma, merge_config.d_hyper
        )
    base = init_hypernet(
        frozen.m_zero.config.d_in, frozen.m, merge_config.d_hyper, seed, w_init=1.0 / merge_config.k
    )
    lambda_mode, w_mode, fixed_lambda = "hyper", "hyper", None
    if variant.startswith("fix_lambda_0"):
        lambda_mode, fixed_lambda = "fixed", 0.0
    elif variant == "fix_lambda_1":
        lambda_mode, fixed_lambda = "fixed", 1.0
    elif variant == "param_lambda":
        lambda_mode = "param"
    elif variant == "param_w":
        w_mode = "param"
    net = HyperNet(base.params, lambda_mode, w_mode, fixed_lambda=fixed_lambda)
    return net, frozen, merge_config


def run_ablation(
    variant: str,
    frozen: FrozenModelSet,
    train_bags: Sequence[Bag],
    test_bags: Sequence[Bag],
    merge_config: MergeConfig,
    train_config: TrainConfig,
) -> AblationResult:
    net, pool, cfg = ablation_setup(variant, frozen, merge_config, train_config.seed)
    net, traj = train_steph(train_bags, pool, cfg, train_config, net=net)
    return AblationResult(
        variant,
        evaluate_steph(net, pool, train_bags, cfg.k),
        evaluate_steph(net, pool, test_bags, cfg.k),
        net, pool, cfg.k, traj,
    )


def best_source_finetune(
    sources: Sequence[ModelWeights], bags: Sequence[Bag], train_config: TrainConfig
) -> tuple[int, ModelWeights]:
    """Head-finetune every source on target data; keep the lowest training loss."""
    tuned = [finetune_head(s, bags, train_config) for s in sources]
    losses = [mean_loss(t, bags) for t in tuned]
    best = int(np.argmin(losses))
    return best, tuned[best]
