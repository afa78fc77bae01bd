"""Synthetic families of multi-instance survival tasks.

Each task plants a prognostic direction ``u_k`` that mixes a direction shared
by the whole family with a private one.  A bag's latent risk ``beta`` shifts a
subset of its instances along ``u_k`` and drives a discrete hazard, so tasks
with a large ``share_weight`` carry transferable signal.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from . import seeding
from .errors import StructureError
from .nn import Bag
from .survival import SurvLabel


@dataclass(frozen=True)
class TaskFamilyConfig:
    n_tasks: int = 13
    d_in: int = 32
    bag_size_range: tuple[int, int] = (8, 32)
    bags_per_task: int = 200
    signal_fraction: float = 0.25
    share_weight: float = 0.7
    censor_rate: float = 0.6
    n_bins: int = 4
    seed: int = 0
    # (task_id, n_bags) pairs overriding bags_per_task for individual tasks
    task_bags: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(
            self, "task_bags", tuple(sorted((int(k), int(n)) for k, n in self.task_bags))
        )
        for k, n in self.task_bags:
            if not 0 <= k < self.n_tasks or n < 1:
                raise StructureError(f"invalid task_bags entry ({k}, {n})")
        lo, hi = self.bag_size_range
        if not 1 <= lo <= hi:
            raise StructureError(f"invalid bag_size_range {self.bag_size_range}")
        if not 0.0 <= self.share_weight <= 1.0:
            raise StructureError("share_weight must lie in [0, 1]")
        if not 0.0 < self.signal_fraction <= 1.0:
            raise StructureError("signal_fraction must lie in (0, 1]")
        if not 0.0 <= self.censor_rate <= 1.0:
            raise StructureError("censor_rate must lie in [0, 1]")
        if self.n_tasks < 1 or self.d_in < 1 or self.n_bins < 1 or self.bags_per_task < 1:
            raise StructureError("counts and dimensions must be >= 1")

    def n_bags(self, task_id: int) -> int:
        return dict(self.task_bags).get(task_id, self.bags_per_task)


@dataclass
class TaskDataset:
    task_id: int
    bags: list[Bag]
    # Ground truth for diagnostics and tests only; training code never reads it.
    planted_direction: np.ndarray = field(repr=False)
    latent_risk: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.bags)


def bin_offsets(n_bins: int) -> np.ndarray:
    """Offsets c_k giving P(event in bin k) = 1/(T+1) for every bin at zero risk."""
    return -np.log(n_bins - np.arange(n_bins, dtype=np.float64))


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _draw_time(rng: np.random.Generator, risk: float, offsets: np.ndarray) -> tuple[int, int]:
    hazards = expit(risk + offsets)
    for k, h in enumerate(hazards):
        if rng.random() < h:
            return k, 1
    return len(offsets) - 1, 0


def gen_task_family(config: TaskFamilyConfig) -> list[TaskDataset]:
    d = config.d_in
    common = _unit(seeding.stream(config.seed, "common"), d)
    offsets = bin_offsets(config.n_bins)
    lo, hi = config.bag_size_range
    tasks = []
    for k in range(config.n_tasks):
        private = _unit(seeding.stream(config.seed, "task", k, "direction"), d)
        u = config.share_weight * common + (1.0 - config.share_weight) * private
        u /= np.linalg.norm(u)
        rng = seeding.stream(config.seed, "task", k, "bags")
        censor_rng = seeding.stream(config.seed, "task", k, "censor")
        bags, risks = [], []
        for _ in range(config.n_bags(k)):
            n = int(rng.integers(lo, hi + 1))
            X = rng.standard_normal((n, d))
            n_signal = max(1, int(round(config.signal_fraction * n)))
            idx = rng.choice(n, size=n_signal, replace=False)
            beta = float(rng.uniform(-2.0, 2.0))
            X[idx] += beta * u
            time_bin, event = _draw_time(rng, beta, offsets)
            if censor_rng.random() < config.censor_rate:
                time_bin, event = int(censor_rng.integers(0, time_bin + 1)), 0
            bags.append(Bag(X, SurvLabel(time_bin, event)))
            risks.append(beta)
        tasks.append(TaskDataset(k, bags, u, np.array(risks)))
    return tasks


class Fold(NamedTuple):
    train: np.ndarray
    test: np.ndarray


def split_folds(dataset, k: int, seed: int) -> list[Fold]:
    """Event-stratified k-fold partition of bag indices."""
    bags = getattr(dataset, "bags", dataset)
    n = len(bags)
    if k < 2:
        raise StructureError("need at least 2 folds")
    if k > n:
        raise StructureError(f"cannot split {n} bags into {k} folds")
    rng = seeding.stream(seed, "folds")
    events = np.array([b.label.event for b in bags])
    order = np.concatenate(
        [rng.permutation(np.flatnonzero(events == 1)), rng.permutation(np.flatnonzero(events == 0))]
    )
    assignment = np.empty(n, dtype=int)
    assignment[order] = np.arange(n) % k
    return [
        Fold(np.flatnonzero(assignment != f), np.flatnonzero(assignment == f))
        for f in range(k)
    ]


def subset(dataset, indices) -> list[Bag]:
    bags = getattr(dataset, "bags", dataset)
    return [bags[i] for i in indices]
