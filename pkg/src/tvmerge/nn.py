"""Attention-MIL prognostic network, hand-written backprop and AdamW training.

Architecture (one bag ``X`` of shape ``n x d_in``)::

    H      = relu(relu(X W1^T + b1) W2^T + b2)            instance embeddings
    s_i    = w . (tanh(V h_i) * sigmoid(U h_i))            gated attention scores
    a      = softmax(s)
    z      = sum_i a_i h_i                                  bag vector
    logits = W z + b                                        discrete hazard logits
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from . import seeding
from .errors import NumericalError, StructureError
from .survival import SurvLabel, nll_loss_and_grad

log = logging.getLogger(__name__)

BLOCK_ORDER = (
    "emb.W1", "emb.b1", "emb.W2", "emb.b2",
    "attn.V", "attn.U", "attn.w",
    "head.W", "head.b",
)
MATRIX_BLOCKS = ("emb.W1", "emb.W2", "attn.V", "attn.U", "head.W")


@dataclass(frozen=True)
class NetConfig:
    d_in: int = 32
    d_embed: int = 64
    d_attn: int = 32
    n_bins: int = 4

    def __post_init__(self):
        for name in ("d_in", "d_embed", "d_attn", "n_bins"):
            if int(getattr(self, name)) < 1:
                raise StructureError(f"NetConfig.{name} must be >= 1")

    def block_shapes(self) -> dict[str, tuple[int, ...]]:
        d, e, a, t = self.d_in, self.d_embed, self.d_attn, self.n_bins
        return {
            "emb.W1": (e, d), "emb.b1": (e,),
            "emb.W2": (e, e), "emb.b2": (e,),
            "attn.V": (a, e), "attn.U": (a, e), "attn.w": (a,),
            "head.W": (t, e), "head.b": (t,),
        }

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.block_shapes().values())


class ParamBlocks:
    """Named parameter blocks conforming to a :class:`NetConfig`.

    Base class for model weights, gradients and task vectors; all of them
    share the same block layout so they can be combined entry by entry.
    """

    __slots__ = ("config", "blocks")

    def __init__(self, config: NetConfig, blocks: dict[str, np.ndarray]):
        shapes = config.block_shapes()
        if set(blocks) != set(shapes):
            raise StructureError(
                f"block names {sorted(blocks)} do not match {sorted(shapes)}"
            )
        arrays = {}
        for name in BLOCK_ORDER:
            arr = np.asarray(blocks[name], dtype=np.float64)
            if arr.shape != shapes[name]:
                raise StructureError(
                    f"block {name} has shape {arr.shape}, expected {shapes[name]}"
                )
            arrays[name] = arr
        self.config = config
        self.blocks = arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.config})"

    def names(self) -> tuple[str, ...]:
        return BLOCK_ORDER

    def flat(self) -> np.ndarray:
        return np.concatenate([self.blocks[n].ravel() for n in BLOCK_ORDER])

    @classmethod
    def from_flat(cls, config: NetConfig, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (config.n_params,):
            raise StructureError(
                f"flat vector has shape {vec.shape}, expected ({config.n_params},)"
            )
        blocks, start = {}, 0
        for name, shape in config.block_shapes().items():
            size = math.prod(shape)
            blocks[name] = vec[start : start + size].reshape(shape)
            start += size
        return cls(config, blocks)

    @classmethod
    def zeros(cls, config: NetConfig):
        return cls(config, {n: np.zeros(s) for n, s in config.block_shapes().items()})

    def copy(self):
        return type(self)(self.config, {n: a.copy() for n, a in self.blocks.items()})

    def map(self, fn: Callable[[np.ndarray], np.ndarray], cls=None):
        cls = cls or type(self)
        return cls(self.config, {n: fn(self.blocks[n]) for n in BLOCK_ORDER})

    def check_matched(self, other: "ParamBlocks") -> None:
        if self.config != other.config:
            raise StructureError(
                f"structure mismatch: {self.config} vs {other.config}"
            )

    def equals(self, other: "ParamBlocks") -> bool:
        """Exact entrywise equality."""
        return self.config == other.config and all(
            np.array_equal(self.blocks[n], other.blocks[n]) for n in BLOCK_ORDER
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.blocks.values())

    def dot(self, other: "ParamBlocks") -> float:
        self.check_matched(other)
        return float(sum(np.sum(self.blocks[n] * other.blocks[n]) for n in BLOCK_ORDER))


class ModelWeights(ParamBlocks):
    """Full parameter set of one MIL network."""


class GradientSet(ParamBlocks):
    """dL/dtheta, block-for-block aligned with the weights it differentiates."""


@dataclass(frozen=True)
class Bag:
    instances: np.ndarray
    label: SurvLabel

    def __post_init__(self):
        x = np.asarray(self.instances, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise StructureError(f"bag must be an n x d matrix with n >= 1, got {x.shape}")
        object.__setattr__(self, "instances", x)

    @property
    def n(self) -> int:
        return self.instances.shape[0]


def init_weights(config: NetConfig, seed: int) -> ModelWeights:
    """Uniform(+-1/sqrt(fan_in)) for weight blocks, zeros for biases."""
    rng = seeding.stream(seed, "init")
    blocks = {}
    for name, shape in config.block_shapes().items():
        if name in ("emb.b1", "emb.b2", "head.b"):
            blocks[name] = np.zeros(shape)
        else:
            fan_in = shape[-1]
            bound = 1.0 / math.sqrt(fan_in)
            blocks[name] = rng.uniform(-bound, bound, size=shape)
    return ModelWeights(config, blocks)


# Instrumentation: callables invoked once per base-network forward pass.
forward_hooks: list[Callable[[ModelWeights, np.ndarray], None]] = []


def _instances(bag_or_x) -> np.ndarray:
    if isinstance(bag_or_x, Bag):
        return bag_or_x.instances
    x = np.asarray(bag_or_x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise StructureError(f"instances must be an n x d matrix with n >= 1, got {x.shape}")
    return x


def embed_instances(weights: ModelWeights, X) -> np.ndarray:
    X = _instances(X)
    if X.shape[1] != weights.config.d_in:
        raise StructureError(
            f"instances have {X.shape[1]} features, network expects {weights.config.d_in}"
        )
    z1 = np.maximum(X @ weights["emb.W1"].T + weights["emb.b1"], 0.0)
    return np.maximum(z1 @ weights["emb.W2"].T + weights["emb.b2"], 0.0)


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max())
    return e / e.sum()


def gated_attention(weights: ModelWeights, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    T = np.tanh(H @ weights["attn.V"].T)
    S = expit(H @ weights["attn.U"].T)
    a = _softmax((T * S) @ weights["attn.w"])
    return a @ H, a


def _forward_pass(weights: ModelWeights, X: np.ndarray) -> dict:
    if X.shape[1] != weights.config.d_in:
        raise StructureError(
            f"instances have {X.shape[1]} features, network expects {weights.config.d_in}"
        )
    for hook in forward_hooks:
        hook(weights, X)
    A1 = X @ weights["emb.W1"].T + weights["emb.b1"]
    Z1 = np.maximum(A1, 0.0)
    A2 = Z1 @ weights["emb.W2"].T + weights["emb.b2"]
    H = np.maximum(A2, 0.0)
    T = np.tanh(H @ weights["attn.V"].T)
    S = expit(H @ weights["attn.U"].T)
    G = T * S
    a = _softmax(G @ weights["attn.w"])
    z = a @ H
    logits = weights["head.W"] @ z + weights["head.b"]
    return dict(X=X, A1=A1, Z1=Z1, A2=A2, H=H, T=T, S=S, G=G, a=a, z=z, logits=logits)


def forward(weights: ModelWeights, bag) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(hazard_logits, attention)`` for one bag."""
    c = _forward_pass(weights, _instances(bag))
    return c["logits"], c["a"]


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def backward(weights: ModelWeights, bag, loss_fn: LossFn | None = None) -> tuple[float, GradientSet]:
    """Loss and gradient w.r.t. every block.

    ``loss_fn`` maps hazard logits to ``(loss, dloss/dlogits)``; it defaults
    to the discrete-hazard NLL of ``bag.label``.
    """
    X = _instances(bag)
    if loss_fn is None:
        if not isinstance(bag, Bag):
            raise StructureError("a loss_fn is required when passing raw instances")
        label = bag.label
        loss_fn = lambda logits: nll_loss_and_grad(logits, label)  # noqa: E731
    c = _forward_pass(weights, X)
    loss, g = loss_fn(c["logits"])
    g = np.asarray(g, dtype=np.float64)
    if not (np.isfinite(loss) and np.all(np.isfinite(g))):
        raise NumericalError(f"non-finite loss or logit gradient (loss={loss})")

    H, a, T, S, G = c["H"], c["a"], c["T"], c["S"], c["G"]
    grads = {"head.W": np.outer(g, c["z"]), "head.b": g.copy()}
    dz = weights["head.W"].T @ g
    dH = np.outer(a, dz)
    da = H @ dz
    ds = a * (da - a @ da)
    grads["attn.w"] = G.T @ ds
    dG = np.outer(ds, weights["attn.w"])
    dPT = dG * S * (1.0 - T * T)
    dPS = dG * T * S * (1.0 - S)
    grads["attn.V"] = dPT.T @ H
    grads["attn.U"] = dPS.T @ H
    dH += dPT @ weights["attn.V"] + dPS @ weights["attn.U"]
    dA2 = dH * (c["A2"] > 0)
    grads["emb.W2"] = dA2.T @ c["Z1"]
    grads["emb.b2"] = dA2.sum(axis=0)
    dA1 = (dA2 @ weights["emb.W2"]) * (c["A1"] > 0)
    grads["emb.W1"] = dA1.T @ X
    grads["emb.b1"] = dA1.sum(axis=0)
    return float(loss), GradientSet(weights.config, grads)


def mean_loss(weights: ModelWeights, bags: Iterable[Bag]) -> float:
    losses = [nll_loss_and_grad(forward(weights, b)[0], b.label)[0] for b in bags]
    return float(np.mean(losses))


def full_batch_gradient(
    weights: ModelWeights, bags: Sequence[Bag], bag_weights: Sequence[float] | None = None
) -> tuple[float, GradientSet]:
    """Weighted sum of per-bag losses and gradients (weights default to 1/N)."""
    if bag_weights is None:
        bag_weights = np.full(len(bags), 1.0 / len(bags))
    total = 0.0
    acc = np.zeros(weights.config.n_params)
    for bag, c in zip(bags, bag_weights):
        loss, g = backward(weights, bag)
        total += c * loss
        acc += c * g.flat()
    return total, GradientSet.from_flat(weights.config, acc)


def gradient_descent_step(
    weights: ModelWeights, bags: Sequence[Bag], lr: float, bag_weights=None
) -> ModelWeights:
    _, g = full_batch_gradient(weights, bags, bag_weights)
    return ModelWeights.from_flat(weights.config, weights.flat() - lr * g.flat())


# ---------------------------------------------------------------------------
# Optimization


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-4
    warmup_epochs: int = 1
    weight_decay: float = 1e-5
    accumulation_bags: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise StructureError("epochs must be >= 0")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise StructureError("warmup_epochs must lie in [0, epochs)")
        if self.accumulation_bags < 1:
            raise StructureError("accumulation_bags must be >= 1")


@dataclass(frozen=True)
class CosineSchedule:
    """Linear warmup to ``base_lr`` then cosine annealing to 0 at ``total_steps``."""

    base_lr: float
    warmup_steps: int
    total_steps: int

    def __call__(self, step: int) -> float:
        if step < 1:
            raise ValueError("steps are 1-based")
        if step <= self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        progress = min(step - self.warmup_steps, span) / span
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))


def adamw_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    step_index: int,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    if step_index < 1:
        raise ValueError("step_index must be >= 1")
    b1, b2 = betas
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1**step_index)
    v_hat = v / (1.0 - b2**step_index)
    new = params * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v)


def fit(
    params: np.ndarray,
    n_samples: int,
    loss_and_grad: Callable[[np.ndarray, int], tuple[float, np.ndarray]],
    config: TrainConfig,
    shuffle_rng: np.random.Generator,
    on_epoch_end: Callable[[int, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Shuffled single-bag passes, gradient accumulation, AdamW + cosine schedule.

    Accumulated gradients are averaged over the bags in each group before the
    optimizer step.  Returns the final parameters and per-epoch mean loss.
    """
    params = np.array(params, dtype=np.float64)
    if config.epochs == 0 or n_samples == 0:
        return params, []
    accum = config.accumulation_bags
    per_epoch = math.ceil(n_samples / accum)
    schedule = CosineSchedule(
        config.learning_rate, config.warmup_epochs * per_epoch, config.epochs * per_epoch
    )
    state = AdamState.zeros(params.size)
    step = 0
    epoch_losses = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n_samples)
        losses = []
        for start in range(0, n_samples, accum):
            group = order[start : start + accum]
            acc = np.zeros_like(params)
            for i in group:
                loss, g = loss_and_grad(params, int(i))
                acc += g
                losses.append(loss)
            step += 1
            params, state = adamw_step(
                params, acc / len(group), state, step, schedule(step), config.weight_decay
            )
        epoch_losses.append(float(np.mean(losses)))
        log.debug("epoch %d mean loss %.6f", epoch + 1, epoch_losses[-1])
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, params)
    return params, epoch_losses


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _bags(dataset) -> list[Bag]:
    return list(getattr(dataset, "bags", dataset))


def train_cancer_specific(
    dataset, net_config: NetConfig, train_config: TrainConfig, init: ModelWeights | None = None
) -> tuple[ModelWeights, TrainLog]:
    """Train one task-specific MIL model from ``init`` (or a fresh seeded init)."""
    bags = _bags(dataset)
    if not bags:
        raise StructureError("cannot train on an empty dataset")
    if init is None:
        init = init_weights(net_config, train_config.seed)
    init.check_matched(ModelWeights.zeros(net_config))
    train_log = TrainLog()
    if not any(b.label.event for b in bags):
        log.warning("all bags are censored; the NLL carries no event signal")
        train_log.warnings.append("all_censored")

    def loss_and_grad(vec, i):
        loss, g = backward(ModelWeights.from_flat(net_config, vec), bags[i])
        return loss, g.flat()

    params, train_log.epoch_losses = fit(
        init.flat(), len(bags), loss_and_grad, train_config,
        seeding.stream(train_config.seed, "shuffle"),
    )
    if train_config.epochs == 0:
        return init.copy(), train_log
    return ModelWeights.from_flat(net_config, params), train_log
