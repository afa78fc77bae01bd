"""Experiment configuration: an INI-style ``key = value`` document with sections.

Sections and defaults::

    [data]         TaskFamilyConfig fields; task_bags as "0:250, 3:100"
    [net]          NetConfig fields
    [train]        TrainConfig fields (base models and baselines)
    [merge]        k, beta, gamma, d_hyper
    [merge_train]  TrainConfig fields for hypernet / AdaMerging training;
                   unset keys fall back to [train]
    [run]          folds, seeds, target_tasks, methods
    [analysis]     step, sigma, alpha, lambda_points, source_task, split, overlay

Unknown sections or keys are rejected before any computation starts.
"""

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .nn import NetConfig, TrainConfig
from .synthdata import TaskFamilyConfig

BASELINE_METHODS = ("vanilla", "model_avg", "adamerging", "finetune")
ABLATION_METHODS = (
    "fix_lambda_0",
    "fix_lambda_0_with_target_in_sources",
    "fix_lambda_1",
    "param_lambda",
    "param_w",
    "dense_no_sparsity",
    "full",
)
METHODS = BASELINE_METHODS + ABLATION_METHODS
# "steph" names the unmodified method; results are recorded under "full".
METHOD_ALIASES = {"steph": "full"}


@dataclass(frozen=True)
class MergeSettings:
    k: int = 5
    beta: float = 0.05
    gamma: float = 0.005
    d_hyper: int = 64


@dataclass(frozen=True)
class RunSettings:
    folds: int = 5
    seeds: tuple[int, ...] = (0,)
    target_tasks: tuple[int, ...] = (0,)
    methods: tuple[str, ...] = ("vanilla", "model_avg", "full")


@dataclass(frozen=True)
class AnalysisSettings:
    step: float = 0.04
    sigma: float = 1.0
    alpha: float = 0.95
    lambda_points: int = 11
    source_task: int | None = None  # None: first source of the target
    split: str = "test"
    overlay: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    data: TaskFamilyConfig = field(default_factory=TaskFamilyConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    merge: MergeSettings = field(default_factory=MergeSettings)
    merge_train: TrainConfig | None = None
    run: RunSettings = field(default_factory=RunSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    def __post_init__(self):
        if self.data.d_in != self.net.d_in:
            raise ConfigError(f"data.d_in={self.data.d_in} but net.d_in={self.net.d_in}")
        if self.data.n_bins != self.net.n_bins:
            raise ConfigError(f"data.n_bins={self.data.n_bins} but net.n_bins={self.net.n_bins}")
        for t in self.run.target_tasks:
            if not 0 <= t < self.data.n_tasks:
                raise ConfigError(f"target task {t} outside 0..{self.data.n_tasks - 1}")
        if self.data.n_tasks < 2:
            raise ConfigError("need at least one source task besides the target")
        if self.run.folds < 2:
            raise ConfigError("run.folds must be >= 2")
        if not self.run.seeds:
            raise ConfigError("run.seeds is empty")
        for m in self.run.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if self.analysis.split not in ("train", "test"):
            raise ConfigError("analysis.split must be 'train' or 'test'")

    @property
    def hyper_train(self) -> TrainConfig:
        return self.merge_train if self.merge_train is not None else self.train

    def family(self, seed: int) -> TaskFamilyConfig:
        return replace(self.data, seed=seed)

    def train_for(self, seed: int, hyper: bool = False) -> TrainConfig:
        return replace(self.hyper_train if hyper else self.train, seed=seed)

    def sources_for(self, target: int) -> list[int]:
        return [k for k in range(self.data.n_tasks) if k != target]

    def to_text(self) -> str:
        """Canonical echo; parsing it back yields an equal config."""
        parser = configparser.ConfigParser(interpolation=None)
        sections = {
            "data": self.data, "net": self.net, "train": self.train, "merge": self.merge,
            "merge_train": self.merge_train, "run": self.run, "analysis": self.analysis,
        }
        for name, obj in sections.items():
            if obj is None:
                continue
            parser[name] = {k: _format(v) for k, v in asdict(obj).items()}
        lines = []
        for name in parser.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in parser[name].items()]
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{a}:{b}" for a, b in value)
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(METHOD_ALIASES.get(v, v) for v in text.replace(",", " ").split())


def _pairs(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for item in text.replace(",", " ").split():
        k, _, n = item.partition(":")
        out.append((int(k), int(n)))
    return tuple(out)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


_PARSERS = {
    "data": (TaskFamilyConfig, {
        "bag_size_range": lambda t: tuple(_int_list(t)), "task_bags": _pairs,
    }),
    "net": (NetConfig, {}),
    "train": (TrainConfig, {}),
    "merge_train": (TrainConfig, {}),
    "merge": (MergeSettings, {}),
    "run": (RunSettings, {
        "seeds": _int_list, "target_tasks": _int_list, "methods": _str_list,
    }),
    "analysis": (AnalysisSettings, {"source_task": _optional_int, "overlay": _bool}),
}


def _build(section: str, items: dict):
    cls, special = _PARSERS[section]
    kinds = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in kinds:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        try:
            if key in special:
                kwargs[key] = special[key](raw)
            elif kinds[key] in (int, "int"):
                kwargs[key] = int(raw)
            elif kinds[key] in (float, "float"):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"bad value for [{section}] {key}: {exc}") from None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid [{section}]: {exc}") from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {' '.join(str(exc).split())}") from None
    parts = {}
    for section in parser.sections():
        if section not in _PARSERS:
            raise ConfigError(f"unknown section [{section}]")
        parts[section] = _build(section, dict(parser[section]))
    try:
        return ExperimentConfig(**parts)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())
