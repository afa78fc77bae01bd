"""On-disk formats for checkpoints and datasets.

Both formats are a magic line, one line of canonical JSON metadata, then raw
little-endian float64 payload.  Identical objects always serialize to
identical bytes.
"""

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import StructureError
from .nn import BLOCK_ORDER, Bag, ModelWeights, NetConfig
from .survival import SurvLabel
from .synthdata import TaskDataset, TaskFamilyConfig

CKPT_MAGIC = b"TVMERGE-CKPT-v1\n"
DATA_MAGIC = b"TVMERGE-DATA-v1\n"
_F64 = np.dtype("<f8")


def _dump_header(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode() + b"\n"


def _split(raw: bytes, magic: bytes, path) -> tuple[dict, bytes]:
    if not raw.startswith(magic):
        raise StructureError(f"{path}: not a {magic.decode().strip()} file")
    rest = raw[len(magic):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise StructureError(f"{path}: truncated header")
    try:
        meta = json.loads(rest[:nl])
    except json.JSONDecodeError as exc:
        raise StructureError(f"{path}: corrupt header ({exc})") from None
    return meta, rest[nl + 1:]


def _payload(body: bytes, count: int, path) -> np.ndarray:
    if len(body) != count * _F64.itemsize:
        raise StructureError(
            f"{path}: payload has {len(body)} bytes, expected {count * _F64.itemsize}"
        )
    return np.frombuffer(body, dtype=_F64).astype(np.float64)


def checkpoint_bytes(weights: ModelWeights, seed: int | None = None, extra: dict | None = None) -> bytes:
    meta = {
        "net": asdict(weights.config),
        "blocks": [[n, list(weights[n].shape)] for n in BLOCK_ORDER],
        "seed": seed,
        "extra": extra or {},
    }
    return CKPT_MAGIC + _dump_header(meta) + weights.flat().astype(_F64).tobytes()


def save_checkpoint(path, weights: ModelWeights, seed: int | None = None, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(weights, seed, extra))


def load_checkpoint(path) -> tuple[ModelWeights, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta, body = _split(path.read_bytes(), CKPT_MAGIC, path)
    config = NetConfig(**meta["net"])
    expected = [[n, list(s)] for n, s in config.block_shapes().items()]
    if meta["blocks"] != expected:
        raise StructureError(f"{path}: block layout does not match its net config")
    vec = _payload(body, config.n_params, path)
    return ModelWeights.from_flat(config, vec.copy()), meta


def dataset_bytes(task: TaskDataset, family: TaskFamilyConfig) -> bytes:
    meta = {
        "family": asdict(family),
        "task_id": task.task_id,
        "d_in": family.d_in,
        "bags": [[b.n, b.label.time_bin, b.label.event] for b in task.bags],
        "has_truth": task.latent_risk is not None,
    }
    parts = [b.instances.astype(_F64).ravel() for b in task.bags]
    parts.append(np.asarray(task.planted_direction, dtype=_F64))
    if task.latent_risk is not None:
        parts.append(np.asarray(task.latent_risk, dtype=_F64))
    return DATA_MAGIC + _dump_header(meta) + np.concatenate(parts).tobytes()


def save_dataset(path, task: TaskDataset, family: TaskFamilyConfig) -> None:
    Path(path).write_bytes(dataset_bytes(task, family))


def load_dataset(path) -> tuple[TaskDataset, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    meta, body = _split(path.read_bytes(), DATA_MAGIC, path)
    d = meta["d_in"]
    sizes = [n for n, _, _ in meta["bags"]]
    count = sum(sizes) * d + d + (len(sizes) if meta["has_truth"] else 0)
    vec = _payload(body, count, path)
    bags, pos = [], 0
    for n, time_bin, event in meta["bags"]:
        X = vec[pos:pos + n * d].reshape(n, d).copy()
        bags.append(Bag(X, SurvLabel(time_bin, event)))
        pos += n * d
    direction = vec[pos:pos + d].copy()
    pos += d
    risk = vec[pos:].copy() if meta["has_truth"] else None
    return TaskDataset(meta["task_id"], bags, direction, risk), meta
