"""Command-line experiment runner.

Run directory layout (``--out``)::

    config.ini                          exact configuration echo
    data/seed<S>/task<KK>.tvd           TVMERGE-DATA-v1 files
    checkpoints/seed<S>/m0.ckpt         shared initialization
    checkpoints/seed<S>/task<KK>_fold<F>.ckpt
    results.tsv                         one row per (method, task, fold, seed)
    trajectories/<method>_task<KK>_fold<F>_seed<S>.tsv
    analysis/...                        landscape, SAR and sweep exports
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .analysis import (
    loss_landscape, overlay_trajectory, sweep_to_tsv, trajectory_to_tsv, tvm_sweep,
)
from .config import ABLATION_METHODS, METHOD_ALIASES, METHODS, ExperimentConfig, load_config
from .errors import ConfigError, DomainError, StructureError, TVMergeError
from .nn import init_weights
from .pipeline import (
    FoldOutcome, base_models_needed, parse_results, results_to_tsv, run_fold, sort_rows,
    summarize, summary_to_tsv, train_base_model,
)
from .steph import FrozenModelSet, MergeConfig, init_hypernet, train_steph
from .synthdata import gen_task_family, split_folds, subset
from .taskvec import SARConfig, sar, task_vector

log = logging.getLogger("tvmerge")

LOG_LEVELS = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def config(self) -> Path:
        return self.root / "config.ini"

    @property
    def results(self) -> Path:
        return self.root / "results.tsv"

    def data(self, seed: int, task: int) -> Path:
        return self.root / "data" / f"seed{seed}" / f"task{task:02d}.tvd"

    def m_zero(self, seed: int) -> Path:
        return self.root / "checkpoints" / f"seed{seed}" / "m0.ckpt"

    def model(self, seed: int, task: int, fold: int) -> Path:
        return self.root / "checkpoints" / f"seed{seed}" / f"task{task:02d}_fold{fold}.ckpt"

    def trajectory(self, method: str, task: int, fold: int, seed: int) -> Path:
        return self.root / "trajectories" / f"{method}_task{task:02d}_fold{fold}_seed{seed}.tsv"

    def analysis(self, name: str) -> Path:
        return self.root / "analysis" / name


def _write(path: Path, data, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"refusing to overwrite {path} (use --force)")
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)


def _echo_config(run: RunDir, cfg: ExperimentConfig, force: bool) -> None:
    text = cfg.to_text()
    if run.config.exists() and run.config.read_text() != text and not force:
        raise ConfigError(f"{run.config} holds a different configuration (use --force)")
    run.root.mkdir(parents=True, exist_ok=True)
    run.config.write_text(text)


def _load_data(run: RunDir, cfg: ExperimentConfig, seed: int) -> dict:
    datasets = {}
    for k in range(cfg.data.n_tasks):
        task, meta = io.load_dataset(run.data(seed, k))
        if meta["family"]["seed"] != seed:
            raise StructureError(f"{run.data(seed, k)} was generated with seed {meta['family']['seed']}")
        datasets[k] = task
    return datasets


def _load_models(run: RunDir, cfg: ExperimentConfig, seed: int):
    m_zero, _ = io.load_checkpoint(run.m_zero(seed))
    models = {}
    for k, f in base_models_needed(cfg):
        weights, _ = io.load_checkpoint(run.model(seed, k, f))
        m_zero.check_matched(weights)
        models[(k, f)] = weights
    return m_zero, models


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(cfg: ExperimentConfig, run: RunDir, args) -> None:
    for seed in cfg.run.seeds:
        family = cfg.family(seed)
        for task in gen_task_family(family):
            _write(run.data(seed, task.task_id), io.dataset_bytes(task, family), args.force)
        log.info("seed %d: wrote %d datasets", seed, family.n_tasks)


def cmd_train_base(cfg: ExperimentConfig, run: RunDir, args) -> None:
    for seed in cfg.run.seeds:
        datasets = _load_data(run, cfg, seed)
        m_zero = init_weights(cfg.net, seed)
        _write(run.m_zero(seed), io.checkpoint_bytes(m_zero, seed, {"role": "m0"}), args.force)
        for k, f in base_models_needed(cfg):
            weights = train_base_model(cfg, seed, datasets[k], f, m_zero)
            extra = {"role": "task", "task_id": k, "fold": f}
            _write(run.model(seed, k, f), io.checkpoint_bytes(weights, seed, extra), args.force)
            log.info("seed %d: trained task %d fold %d", seed, k, f)


def _fold_job(job) -> FoldOutcome:
    cfg, root, methods, seed, target, fold = job
    run = RunDir(root)
    datasets = _load_data(run, cfg, seed)
    m_zero, models = _load_models(run, cfg, seed)
    return run_fold(cfg, methods, seed, target, fold, datasets, m_zero, models)


def resolve_methods(text: str | None, cfg: ExperimentConfig) -> tuple[str, ...]:
    if text is None:
        return cfg.run.methods
    out = []
    for tag in text.replace(",", " ").split():
        if tag == "all":
            out += METHODS
        elif tag == "ablations":
            out += ABLATION_METHODS
        else:
            tag = METHOD_ALIASES.get(tag, tag)
            if tag not in METHODS:
                raise ConfigError(f"unknown method {tag!r}; choose from {', '.join(METHODS)}")
            out.append(tag)
    return tuple(dict.fromkeys(out))


def cmd_merge(cfg: ExperimentConfig, run: RunDir, args) -> None:
    methods = resolve_methods(args.method, cfg)
    for seed in cfg.run.seeds:
        for target in cfg.run.target_tasks:
            m = len(cfg.sources_for(target))
            if cfg.merge.k > m and any(x in ABLATION_METHODS and x != "dense_no_sparsity" for x in methods):
                raise DomainError(f"merge.k={cfg.merge.k} exceeds the number of sources m={m}")
            for path in [run.m_zero(seed)] + [run.model(seed, k, f) for k, f in base_models_needed(cfg)]:
                if not path.exists():
                    raise FileNotFoundError(f"checkpoint not found: {path}")
    jobs = [
        (cfg, str(run.root), methods, seed, target, fold)
        for seed in cfg.run.seeds for target in cfg.run.target_tasks for fold in range(cfg.run.folds)
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_fold_job, jobs))
    else:
        outcomes = [_fold_job(j) for j in jobs]

    existing = parse_results(run.results.read_text()) if run.results.exists() else []
    new_rows = [r for o in outcomes for r in o.rows]
    new_keys = {r.key() for r in new_rows}
    clashes = [r.key() for r in existing if r.key() in new_keys]
    if clashes and not args.force:
        raise FileExistsError(f"{run.results} already has rows for {clashes[0]} (use --force)")
    rows = [r for r in existing if r.key() not in new_keys] + new_rows
    run.results.write_text(results_to_tsv(sort_rows(rows)))
    for job, outcome in zip(jobs, outcomes):
        _, _, _, seed, target, fold = job
        for method, traj in outcome.trajectories.items():
            _write(run.trajectory(method, target, fold, seed), traj.to_tsv(), True)


def cmd_report(cfg: ExperimentConfig | None, run: RunDir, args) -> None:
    paths = [Path(p) for p in args.results] or [run.results]
    rows = []
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"results file not found: {p}")
        try:
            rows += parse_results(p.read_text())
        except ValueError as exc:
            raise StructureError(f"{p}: {exc}") from None
    if not rows:
        raise StructureError("no result rows to report")
    sys.stdout.write(summary_to_tsv(summarize(rows)))


def _analysis_inputs(cfg: ExperimentConfig, run: RunDir):
    seed, target, fold = cfg.run.seeds[0], cfg.run.target_tasks[0], 0
    datasets = _load_data(run, cfg, seed)
    m_zero, models = _load_models(run, cfg, seed)
    split = split_folds(datasets[target], cfg.run.folds, seed)[fold]
    train_bags = subset(datasets[target], split.train)
    test_bags = subset(datasets[target], split.test)
    tau_t = task_vector(models[(target, fold)], m_zero)
    sources = cfg.sources_for(target)
    taus = {s: task_vector(models[(s, 0)], m_zero) for s in sources}
    source = cfg.analysis.source_task if cfg.analysis.source_task is not None else sources[0]
    if source not in taus:
        raise ConfigError(f"analysis.source_task {source} is not a source of target {target}")
    tag = f"seed{seed}_task{target:02d}"
    return seed, m_zero, tau_t, taus, source, train_bags, test_bags, tag


def cmd_landscape(cfg: ExperimentConfig, run: RunDir, args) -> None:
    seed, m_zero, tau_t, taus, source, train_bags, test_bags, tag = _analysis_inputs(cfg, run)
    a = cfg.analysis
    bags = test_bags if a.split == "test" else train_bags
    grid = loss_landscape(m_zero, taus[source], tau_t, bags, a.step, a.sigma, a.split)
    stem = f"landscape_{tag}_src{source:02d}_{a.split}"
    _write(run.analysis(stem + ".tsv"), grid.to_tsv(smoothed=True), True)
    _write(run.analysis(stem + "_raw.tsv"), grid.to_tsv(smoothed=False), True)
    if a.overlay:
        # single-source merge so (lambda, w) maps onto this (tau_s, tau_t) plane
        frozen = FrozenModelSet(m_zero, tau_t, (taus[source],))
        merge_config = MergeConfig(1, 1, cfg.merge.beta, cfg.merge.gamma, cfg.merge.d_hyper)
        net = init_hypernet(cfg.net.d_in, 1, cfg.merge.d_hyper, seed, w_init=1.0)
        _, traj = train_steph(train_bags, frozen, merge_config, cfg.train_for(seed, hyper=True), net=net)
        points = overlay_trajectory(grid, traj)
        _write(run.analysis(f"trajectory_{tag}_src{source:02d}.tsv"), trajectory_to_tsv(points), True)


def cmd_sar(cfg: ExperimentConfig, run: RunDir, args) -> None:
    _, _, tau_t, taus, _, _, _, tag = _analysis_inputs(cfg, run)
    config = SARConfig(cfg.analysis.alpha)
    lines = ["source\tblock\tR_alpha\tsar"]
    for s in sorted(taus):
        body = sar(tau_t, taus[s], config).to_tsv().splitlines()[1:]
        lines += [f"{s}\t{ln}" for ln in body]
    _write(run.analysis(f"sar_{tag}_alpha{cfg.analysis.alpha!r}.tsv"), "\n".join(lines) + "\n", True)


def cmd_sweep(cfg: ExperimentConfig, run: RunDir, args) -> None:
    _, m_zero, tau_t, taus, source, train_bags, test_bags, tag = _analysis_inputs(cfg, run)
    grid = np.linspace(0.0, 1.0, cfg.analysis.lambda_points)
    rows = tvm_sweep(m_zero, tau_t, taus[source], train_bags, test_bags, grid, cfg.analysis.alpha)
    _write(run.analysis(f"sweep_{tag}_src{source:02d}.tsv"), sweep_to_tsv(rows), True)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "merge": cmd_merge,
    "report": cmd_report,
    "landscape": cmd_landscape,
    "sar": cmd_sar,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tvmerge", description="Task-vector merging experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config file (defaults apply when omitted)")
        p.add_argument("--out", default="tvmerge-run", help="run directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--seed", type=int, help="run a single root seed instead of run.seeds")
        if name == "merge":
            p.add_argument("--method", help="comma-separated tags, 'all' or 'ablations'")
            p.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
        if name == "report":
            p.add_argument("results", nargs="*", help="results files (default: <out>/results.tsv)")
        if name == "landscape":
            p.add_argument("--step", type=float)
            p.add_argument("--sigma", type=float)
        if name in ("sar", "sweep"):
            p.add_argument("--alpha", type=float)
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, seeds=(args.seed,)))
    updates = {
        key: getattr(args, key) for key in ("step", "sigma", "alpha")
        if getattr(args, key, None) is not None
    }
    if updates:
        cfg = replace(cfg, analysis=replace(cfg.analysis, **updates))
    return cfg


def _configure_logging() -> None:
    level_name = os.environ.get("TVMERGE_LOG", "info").strip().lower()
    if level_name not in LOG_LEVELS:
        raise ConfigError(f"TVMERGE_LOG must be one of {', '.join(LOG_LEVELS)}, got {level_name!r}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(LOG_LEVELS[level_name])
    log.propagate = False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        run = RunDir(args.out)
        if args.command != "report":
            # the echo records the file configuration; flag overrides only select work
            _echo_config(run, cfg, args.force)
        cfg = _apply_overrides(cfg, args)
        COMMANDS[args.command](cfg, run, args)
    except (TVMergeError, OSError, ValueError) as exc:
        record = {"error": type(exc).__name__, "command": args.command, "message": " ".join(str(exc).split())}
        sys.stderr.write(json.dumps(record) + "\n")
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
