"""Experiment orchestration shared by the command line and the acceptance suite.

Fold protocol: every source model is trained on the first split (fold 0) of its
own task; the target model is trained on the current fold.  A single shared
initialization ``M0`` is drawn per root seed.
"""

import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .baselines import (
    ABLATION_TAGS, Evaluation, adamerging_train, best_source_finetune, evaluate_model,
    model_average, run_ablation,
)
from .config import ExperimentConfig
from .errors import DomainError
from .nn import ModelWeights, init_weights, train_cancer_specific
from .steph import FrozenModelSet, MergeConfig, TrajectoryLog
from .synthdata import TaskDataset, gen_task_family, split_folds, subset

log = logging.getLogger("tvmerge")

RESULT_COLUMNS = (
    "method", "task_id", "fold", "seed", "c_index", "final_train_loss", "final_test_loss", "wall_time",
)


@dataclass(frozen=True)
class ResultRow:
    method: str
    task_id: int
    fold: int
    seed: int
    c_index: float
    final_train_loss: float
    final_test_loss: float
    wall_time: float

    def key(self) -> tuple:
        return (self.method, self.task_id, self.fold, self.seed)

    def to_line(self) -> str:
        return "\t".join([
            self.method, str(self.task_id), str(self.fold), str(self.seed),
            repr(self.c_index), repr(self.final_train_loss), repr(self.final_test_loss),
            f"{self.wall_time:.3f}",
        ])

    @classmethod
    def from_line(cls, line: str) -> "ResultRow":
        f = line.rstrip("\n").split("\t")
        if len(f) != len(RESULT_COLUMNS):
            raise ValueError(f"results row has {len(f)} fields, expected {len(RESULT_COLUMNS)}")
        return cls(f[0], int(f[1]), int(f[2]), int(f[3]), float(f[4]), float(f[5]), float(f[6]), float(f[7]))


def sort_rows(rows: Sequence[ResultRow]) -> list[ResultRow]:
    return sorted(rows, key=ResultRow.key)


def results_to_tsv(rows: Sequence[ResultRow]) -> str:
    return "\n".join(["\t".join(RESULT_COLUMNS)] + [r.to_line() for r in sort_rows(rows)]) + "\n"


def parse_results(text: str) -> list[ResultRow]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or tuple(lines[0].split("\t")) != RESULT_COLUMNS:
        raise ValueError("missing or wrong results header")
    return [ResultRow.from_line(ln) for ln in lines[1:]]


def summarize(rows: Sequence[ResultRow]) -> list[tuple[str, int, float, float, float]]:
    """Per method: (method, n, mean C-index, std C-index, mean test loss); std uses ddof=0."""
    groups: dict[str, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault(r.method, []).append(r)
    out = []
    for method in sorted(groups):
        c = np.array([r.c_index for r in groups[method]])
        loss = np.array([r.final_test_loss for r in groups[method]])
        out.append((method, c.size, float(c.mean()), float(c.std()), float(loss.mean())))
    return out


def summary_to_tsv(summary) -> str:
    lines = ["method\tn\tc_index_mean\tc_index_std\ttest_loss_mean"]
    lines += [f"{m}\t{n}\t{mu:.4f}\t{sd:.4f}\t{tl:.4f}" for m, n, mu, sd, tl in summary]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Stages


def base_models_needed(cfg: ExperimentConfig) -> list[tuple[int, int]]:
    """(task, fold) pairs to train: every fold of each target, fold 0 of the rest."""
    needed = {(k, 0) for k in range(cfg.data.n_tasks)}
    needed |= {(t, f) for t in cfg.run.target_tasks for f in range(cfg.run.folds)}
    return sorted(needed)


def train_base_model(
    cfg: ExperimentConfig, seed: int, dataset: TaskDataset, fold: int, m_zero: ModelWeights
) -> ModelWeights:
    split = split_folds(dataset, cfg.run.folds, seed)[fold]
    weights, train_log = train_cancer_specific(
        subset(dataset, split.train), cfg.net, cfg.train_for(seed), init=m_zero
    )
    for w in train_log.warnings:
        log.warning("task %d fold %d seed %d: %s", dataset.task_id, fold, seed, w)
    return weights


@dataclass
class FoldOutcome:
    rows: list[ResultRow]
    trajectories: dict[str, TrajectoryLog]


def run_fold(
    cfg: ExperimentConfig,
    methods: Sequence[str],
    seed: int,
    target: int,
    fold: int,
    datasets: dict[int, TaskDataset],
    m_zero: ModelWeights,
    models: dict[tuple[int, int], ModelWeights],
) -> FoldOutcome:
    """Evaluate each method on one (seed, target, fold) unit."""
    sources = cfg.sources_for(target)
    m = len(sources)
    if cfg.merge.k > m and any(meth in ABLATION_TAGS and meth != "dense_no_sparsity" for meth in methods):
        raise DomainError(f"merge.k={cfg.merge.k} exceeds the number of sources m={m}")
    split = split_folds(datasets[target], cfg.run.folds, seed)[fold]
    train_bags = subset(datasets[target], split.train)
    test_bags = subset(datasets[target], split.test)
    m_target = models[(target, fold)]
    source_models = [models[(s, 0)] for s in sources]
    frozen = FrozenModelSet.from_models(m_zero, m_target, source_models)
    merge_config = MergeConfig(m, min(cfg.merge.k, m), cfg.merge.beta, cfg.merge.gamma, cfg.merge.d_hyper)
    base_train = cfg.train_for(seed)
    hyper_train = cfg.train_for(seed, hyper=True)

    rows, trajectories = [], {}
    for method in methods:
        start = time.perf_counter()
        if method in ABLATION_TAGS:
            result = run_ablation(method, frozen, train_bags, test_bags, merge_config, hyper_train)
            train_eval, test_eval = result.train, result.test
            trajectories[method] = result.trajectory
        else:
            model = _baseline_model(method, m_target, source_models, frozen, train_bags, base_train, hyper_train)
            train_eval, test_eval = evaluate_model(model, train_bags), evaluate_model(model, test_bags)
        elapsed = time.perf_counter() - start
        rows.append(_row(method, target, fold, seed, train_eval, test_eval, elapsed))
        log.info("seed %d task %d fold %d %s: C=%.4f", seed, target, fold, method, test_eval.c_index)
    return FoldOutcome(rows, trajectories)


def _baseline_model(method, m_target, source_models, frozen, train_bags, base_train, hyper_train):
    if method == "vanilla":
        return m_target
    if method == "model_avg":
        return model_average([m_target] + list(source_models))
    if method == "adamerging":
        return adamerging_train(frozen, train_bags, hyper_train)[2]
    if method == "finetune":
        return best_source_finetune(source_models, train_bags, base_train)[1]
    raise DomainError(f"unknown method {method!r}")


def _row(method, target, fold, seed, train_eval: Evaluation, test_eval: Evaluation, elapsed) -> ResultRow:
    return ResultRow(
        method, target, fold, seed, test_eval.c_index, train_eval.loss, test_eval.loss, elapsed
    )


def transfer_experiment(cfg: ExperimentConfig, methods: Sequence[str] | None = None) -> list[ResultRow]:
    """Whole pipeline in memory: data, base models, then every method on every fold."""
    methods = tuple(methods or cfg.run.methods)
    rows = []
    for seed in cfg.run.seeds:
        datasets = {t.task_id: t for t in gen_task_family(cfg.family(seed))}
        m_zero = init_weights(cfg.net, seed)
        models = {
            (k, f): train_base_model(cfg, seed, datasets[k], f, m_zero)
            for k, f in base_models_needed(cfg)
        }
        for target in cfg.run.target_tasks:
            for fold in range(cfg.run.folds):
                rows += run_fold(cfg, methods, seed, target, fold, datasets, m_zero, models).rows
    return sort_rows(rows)
