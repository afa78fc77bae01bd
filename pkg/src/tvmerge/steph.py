"""Hypernetwork-driven sparse task-vector mixup.

For a bag ``X`` a shared mean-pool encoder feeds two linear heads:

    lambda = sigmoid(head_lambda(z))        mixup coefficient per source
    w      = softplus(head_w(z))            aggregation weight per source

The bag is then scored by one merged network

    M* = M0 + sum_{j in topK(w)} w_j (lambda_j tau_t + (1 - lambda_j) tau_s_j)

Only the hypernetwork is trained; the base task vectors stay frozen.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from . import seeding
from .errors import DomainError, NumericalError, StructureError
from .nn import Bag, ModelWeights, TrainConfig, backward, fit, forward
from .survival import SurvLabel, nll_loss_and_grad
from .taskvec import TaskVector, apply, mixup, sparse_aggregate, task_vector, top_k_indices

HYPER_BLOCKS = ("enc.E", "enc.b", "lam.W", "lam.b", "w.W", "w.b")
MODES = ("hyper", "param", "fixed")


@dataclass(frozen=True)
class MergeConfig:
    m: int
    k: int = 5
    beta: float = 0.05
    gamma: float = 0.005
    d_hyper: int = 64

    def __post_init__(self):
        if self.m < 1:
            raise DomainError("need at least one source model")
        if not 1 <= self.k <= self.m:
            raise DomainError(f"top-K requires 1 <= k <= m, got k={self.k}, m={self.m}")
        if self.beta < 0 or self.gamma < 0:
            raise DomainError("beta and gamma must be non-negative")
        if self.d_hyper < 1:
            raise DomainError("d_hyper must be >= 1")


@dataclass(frozen=True)
class HyperOutput:
    lam: np.ndarray
    w: np.ndarray

    @property
    def m(self) -> int:
        return self.lam.size


@dataclass
class HyperNet:
    """Shared mean-MIL encoder with a lambda head and a w head.

    ``lambda_mode`` / ``w_mode`` select how each coefficient is produced:
    ``"hyper"`` (input-conditional head), ``"param"`` (``sigmoid``/``softplus``
    of the head bias only, shared across inputs) or ``"fixed"`` (constants).
    """

    params: dict[str, np.ndarray]
    lambda_mode: str = "hyper"
    w_mode: str = "hyper"
    fixed_lambda: np.ndarray | None = None
    fixed_w: np.ndarray | None = None

    def __post_init__(self):
        if set(self.params) != set(HYPER_BLOCKS):
            raise StructureError(f"hypernet blocks must be {HYPER_BLOCKS}")
        if self.lambda_mode not in MODES or self.w_mode not in MODES:
            raise StructureError(f"modes must be one of {MODES}")
        if self.lambda_mode == "fixed":
            self.fixed_lambda = np.broadcast_to(
                np.asarray(self.fixed_lambda, dtype=np.float64), (self.m,)
            ).copy()
            if np.any(self.fixed_lambda < 0) or np.any(self.fixed_lambda > 1):
                raise DomainError("fixed lambda must lie in [0, 1]")
        if self.w_mode == "fixed":
            self.fixed_w = np.broadcast_to(
                np.asarray(self.fixed_w, dtype=np.float64), (self.m,)
            ).copy()
            if np.any(self.fixed_w < 0):
                raise DomainError("fixed w must be non-negative")

    @property
    def d_in(self) -> int:
        return self.params["enc.E"].shape[1]

    @property
    def d_hyper(self) -> int:
        return self.params["enc.E"].shape[0]

    @property
    def m(self) -> int:
        return self.params["lam.b"].shape[0]

    def trainable(self) -> tuple[str, ...]:
        names = []
        uses_encoder = "hyper" in (self.lambda_mode, self.w_mode)
        if uses_encoder:
            names += ["enc.E", "enc.b"]
        if self.lambda_mode == "hyper":
            names += ["lam.W", "lam.b"]
        elif self.lambda_mode == "param":
            names += ["lam.b"]
        if self.w_mode == "hyper":
            names += ["w.W", "w.b"]
        elif self.w_mode == "param":
            names += ["w.b"]
        return tuple(names)

    def flat(self, names: Sequence[str] | None = None) -> np.ndarray:
        names = self.trainable() if names is None else names
        if not names:
            return np.zeros(0)
        return np.concatenate([self.params[n].ravel() for n in names])

    def with_flat(self, vec: np.ndarray, names: Sequence[str] | None = None) -> "HyperNet":
        names = self.trainable() if names is None else names
        params = dict(self.params)
        start = 0
        for n in names:
            size = self.params[n].size
            params[n] = np.asarray(vec[start : start + size]).reshape(self.params[n].shape)
            start += size
        if start != len(vec):
            raise StructureError("flat hypernet vector has the wrong length")
        return HyperNet(params, self.lambda_mode, self.w_mode, self.fixed_lambda, self.fixed_w)

    def copy(self) -> "HyperNet":
        return HyperNet(
            {n: a.copy() for n, a in self.params.items()},
            self.lambda_mode, self.w_mode, self.fixed_lambda, self.fixed_w,
        )


def softplus_inverse(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


def init_hypernet(
    d_in: int, m: int, d_hyper: int = 64, seed: int = 0, w_init: float | None = None
) -> HyperNet:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases.

    ``w_init`` sets the w-head bias so that every w starts near that value.
    """
    rng = seeding.stream(seed, "hyper")
    b_enc, b_head = 1.0 / np.sqrt(d_in), 1.0 / np.sqrt(d_hyper)
    params = {
        "enc.E": rng.uniform(-b_enc, b_enc, (d_hyper, d_in)),
        "enc.b": np.zeros(d_hyper),
        "lam.W": rng.uniform(-b_head, b_head, (m, d_hyper)),
        "lam.b": np.zeros(m),
        "w.W": rng.uniform(-b_head, b_head, (m, d_hyper)),
        "w.b": np.zeros(m),
    }
    if w_init is not None:
        params["w.b"][:] = softplus_inverse(w_init)
    return HyperNet(params)


def _hyper_pass(net: HyperNet, X: np.ndarray):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise StructureError("hypernetwork needs a non-empty n x d bag")
    if X.shape[1] != net.d_in:
        raise StructureError(f"bag has {X.shape[1]} features, hypernet expects {net.d_in}")
    p = net.params
    A = X @ p["enc.E"].T + p["enc.b"]
    z = np.maximum(A, 0.0).mean(axis=0)
    if net.lambda_mode == "hyper":
        lam_logit = p["lam.W"] @ z + p["lam.b"]
    else:
        lam_logit = p["lam.b"]
    lam = net.fixed_lambda if net.lambda_mode == "fixed" else expit(lam_logit)
    if net.w_mode == "hyper":
        w_logit = p["w.W"] @ z + p["w.b"]
    else:
        w_logit = p["w.b"]
    w = net.fixed_w if net.w_mode == "fixed" else np.logaddexp(0.0, w_logit)
    cache = dict(X=X, A=A, z=z, lam=lam, w_logit=w_logit)
    return HyperOutput(np.array(lam), np.array(w)), cache


def hyper_forward(net: HyperNet, X) -> HyperOutput:
    if isinstance(X, Bag):
        X = X.instances
    return _hyper_pass(net, X)[0]


def _hyper_backward(net: HyperNet, cache, dlam: np.ndarray, dw: np.ndarray) -> dict[str, np.ndarray]:
    p = net.params
    grads = {}
    dz = np.zeros_like(cache["z"])
    if net.lambda_mode != "fixed":
        lam = cache["lam"]
        dlogit = dlam * lam * (1.0 - lam)
        grads["lam.b"] = dlogit
        if net.lambda_mode == "hyper":
            grads["lam.W"] = np.outer(dlogit, cache["z"])
            dz += p["lam.W"].T @ dlogit
    if net.w_mode != "fixed":
        dlogit = dw * expit(cache["w_logit"])
        grads["w.b"] = dlogit
        if net.w_mode == "hyper":
            grads["w.W"] = np.outer(dlogit, cache["z"])
            dz += p["w.W"].T @ dlogit
    if "hyper" in (net.lambda_mode, net.w_mode):
        n = cache["X"].shape[0]
        dA = (cache["A"] > 0) * (dz / n)
        grads["enc.E"] = dA.T @ cache["X"]
        grads["enc.b"] = dA.sum(axis=0)
    return grads


@dataclass(frozen=True)
class FrozenModelSet:
    m_zero: ModelWeights
    tau_t: TaskVector
    tau_sources: tuple[TaskVector, ...]

    def __post_init__(self):
        object.__setattr__(self, "tau_sources", tuple(self.tau_sources))
        for tau in (self.tau_t,) + self.tau_sources:
            self.m_zero.check_matched(tau)

    @classmethod
    def from_models(cls, m_zero: ModelWeights, m_target: ModelWeights, sources: Sequence[ModelWeights]):
        return cls(
            m_zero, task_vector(m_target, m_zero), tuple(task_vector(s, m_zero) for s in sources)
        )

    @property
    def m(self) -> int:
        return len(self.tau_sources)

    @cached_property
    def _flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        m0 = self.m_zero.flat()
        tt = self.tau_t.flat()
        ts = np.stack([t.flat() for t in self.tau_sources]) if self.tau_sources else np.zeros((0, tt.size))
        for a in (m0, tt, ts):
            a.setflags(write=False)
        return m0, tt, ts

    def fingerprints(self) -> tuple[str, tuple[str, ...]]:
        return self.tau_t.fingerprint(), tuple(t.fingerprint() for t in self.tau_sources)


def assemble_target(frozen: FrozenModelSet, out: HyperOutput, k: int) -> ModelWeights:
    """M0 + sparse_aggregate({mixup(tau_t, tau_s_i, lambda_i)}, w, k)."""
    if out.m != frozen.m:
        raise StructureError(f"hypernet output has {out.m} entries, frozen set has {frozen.m} sources")
    mixtures = [mixup(frozen.tau_t, ts, float(l)) for ts, l in zip(frozen.tau_sources, out.lam)]
    return apply(frozen.m_zero, sparse_aggregate(mixtures, out.w, k), 1.0)


def _assemble_flat(frozen: FrozenModelSet, out: HyperOutput, selected: np.ndarray) -> np.ndarray:
    m0, tt, ts = frozen._flat
    lam, w = out.lam[selected], out.w[selected]
    mixes = lam[:, None] * tt + (1.0 - lam)[:, None] * ts[selected]
    return m0 + w @ mixes


def steph_loss(hazard_logits, label: SurvLabel, out: HyperOutput, k: int, beta: float, gamma: float):
    """Total loss ``L_sl + beta * L_mix + gamma * L_agg`` and its parts."""
    l_sl, _ = nll_loss_and_grad(hazard_logits, label)
    selected = top_k_indices(out.w, k)
    l_mix = float(np.sum(out.lam[selected] ** 2) / k)
    l_agg = float(logsumexp(out.w) ** 2)
    total = l_sl + beta * l_mix + gamma * l_agg
    return total, {"sl": l_sl, "mix": l_mix, "agg": l_agg}


def steph_backward(net: HyperNet, frozen: FrozenModelSet, bag: Bag, config: MergeConfig):
    """Loss and gradients for the trainable hypernetwork blocks.

    Top-K selection is held fixed.  For a selected source j,
    ``dL/dlambda_j = w_j <dL/dW, tau_t - tau_s_j>`` and
    ``dL/dw_j = <dL/dW, tau_mix_j>``; unselected sources get zero.
    Returns ``(total_loss, grads, parts, out)``.
    """
    out, cache = _hyper_pass(net, bag.instances)
    k = config.k
    selected = top_k_indices(out.w, k)
    merged = ModelWeights.from_flat(frozen.m_zero.config, _assemble_flat(frozen, out, selected))
    l_sl, g_w = backward(merged, bag)
    g = g_w.flat()
    _, tt, ts = frozen._flat
    g_t, g_s = g @ tt, ts[selected] @ g
    lam, w = out.lam[selected], out.w[selected]

    dlam = np.zeros(out.m)
    dw = np.zeros(out.m)
    dlam[selected] = w * (g_t - g_s) + config.beta * 2.0 * lam / k
    dw[selected] = lam * g_t + (1.0 - lam) * g_s
    lse = logsumexp(out.w)
    dw += config.gamma * 2.0 * lse * np.exp(out.w - lse)

    l_mix = float(np.sum(lam**2) / k)
    l_agg = float(lse**2)
    total = l_sl + config.beta * l_mix + config.gamma * l_agg
    if not np.isfinite(total):
        raise NumericalError("non-finite STEPH loss")
    grads = _hyper_backward(net, cache, dlam, dw)
    return total, grads, {"sl": l_sl, "mix": l_mix, "agg": l_agg}, out


def predict(net: HyperNet, frozen: FrozenModelSet, bag, k: int) -> tuple[np.ndarray, HyperOutput]:
    """Score one bag with its own merged model (a single base-network forward)."""
    X = bag.instances if isinstance(bag, Bag) else bag
    out = hyper_forward(net, X)
    logits, _ = forward(assemble_target(frozen, out, k), X)
    return logits, out


@dataclass
class TrajectoryLog:
    """Per-epoch mean lambda / w over the training bags (one row per source)."""

    tau_t_fingerprint: str
    source_fingerprints: tuple[str, ...]
    rows: list[tuple[int, int, float, float]] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)

    def epoch_means(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        out: dict[int, tuple[list, list]] = {}
        for epoch, _, lam, w in self.rows:
            out.setdefault(epoch, ([], []))
            out[epoch][0].append(lam)
            out[epoch][1].append(w)
        return {e: (np.array(l), np.array(w)) for e, (l, w) in out.items()}

    def to_tsv(self) -> str:
        lines = ["epoch\tsource_id\tmean_lambda\tmean_w"]
        lines += [f"{e}\t{s}\t{l!r}\t{w!r}" for e, s, l, w in self.rows]
        return "\n".join(lines) + "\n"


def mean_outputs(net: HyperNet, bags: Sequence[Bag]) -> tuple[np.ndarray, np.ndarray]:
    outs = [hyper_forward(net, b.instances) for b in bags]
    return np.mean([o.lam for o in outs], axis=0), np.mean([o.w for o in outs], axis=0)


def train_steph(
    bags: Sequence[Bag],
    frozen: FrozenModelSet,
    merge_config: MergeConfig,
    train_config: TrainConfig,
    net: HyperNet | None = None,
) -> tuple[HyperNet, TrajectoryLog]:
    bags = list(getattr(bags, "bags", bags))
    if merge_config.m != frozen.m:
        raise StructureError(f"merge config expects m={merge_config.m}, frozen set has {frozen.m}")
    if net is None:
        net = init_hypernet(
            frozen.m_zero.config.d_in, frozen.m, merge_config.d_hyper,
            train_config.seed, w_init=1.0 / merge_config.k,
        )
    names = net.trainable()
    t_fp, s_fp = frozen.fingerprints()
    traj = TrajectoryLog(t_fp, s_fp)

    def loss_and_grad(vec, i):
        current = net.with_flat(vec, names)
        loss, grads, _, _ = steph_backward(current, frozen, bags[i], merge_config)
        if not names:
            return loss, np.zeros(0)
        return loss, np.concatenate([grads[n].ravel() for n in names])

    def record(epoch, vec):
        lam, w = mean_outputs(net.with_flat(vec, names), bags)
        traj.rows.extend((epoch, j, float(lam[j]), float(w[j])) for j in range(frozen.m))

    params, traj.epoch_losses = fit(
        net.flat(names), len(bags), loss_and_grad, train_config,
        seeding.stream(train_config.seed, "hyper-shuffle"), on_epoch_end=record,
    )
    return net.with_flat(params, names), traj
