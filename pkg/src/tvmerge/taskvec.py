"""Task-vector algebra and subspace alignment ratio (SAR)."""

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, StructureError
from .linalg import frobenius_norm, svd
from .nn import BLOCK_ORDER, ModelWeights, ParamBlocks


class TaskVector(ParamBlocks):
    """Blockwise difference between a trained model and its initialization."""

    def fingerprint(self) -> str:
        return hashlib.sha1(self.flat().tobytes()).hexdigest()[:16]


def task_vector(m_task: ModelWeights, m_zero: ModelWeights) -> TaskVector:
    m_task.check_matched(m_zero)
    return TaskVector(
        m_task.config, {n: m_task[n] - m_zero[n] for n in BLOCK_ORDER}
    )


def apply(m_zero: ModelWeights, tau: ParamBlocks, scale: float = 1.0) -> ModelWeights:
    m_zero.check_matched(tau)
    return ModelWeights(
        m_zero.config, {n: m_zero[n] + scale * tau[n] for n in BLOCK_ORDER}
    )


def mixup(tau_t: TaskVector, tau_s: TaskVector, lam: float) -> TaskVector:
    """``lam * tau_t + (1 - lam) * tau_s``; the endpoints return copies."""
    tau_t.check_matched(tau_s)
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"mixup coefficient must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return TaskVector(tau_t.config, {n: tau_t[n].copy() for n in BLOCK_ORDER})
    if lam == 0.0:
        return TaskVector(tau_s.config, {n: tau_s[n].copy() for n in BLOCK_ORDER})
    return TaskVector(
        tau_t.config,
        {n: lam * tau_t[n] + (1.0 - lam) * tau_s[n] for n in BLOCK_ORDER},
    )


def top_k_indices(w, k: int) -> np.ndarray:
    """Indices of the k largest entries, ascending; ties go to the lower index."""
    w = np.asarray(w, dtype=np.float64)
    if not 1 <= k <= w.size:
        raise DomainError(f"top-K needs 1 <= k <= {w.size}, got k={k}")
    return np.sort(np.argsort(-w, kind="stable")[:k])


def sparse_aggregate(mixtures: Sequence[TaskVector], w, k: int) -> TaskVector:
    w = np.asarray(w, dtype=np.float64)
    if len(mixtures) != w.size or w.size < 1:
        raise StructureError(f"{len(mixtures)} mixtures but {w.size} weights")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise DomainError("aggregation weights must be finite and non-negative")
    for tau in mixtures[1:]:
        mixtures[0].check_matched(tau)
    selected = top_k_indices(w, k)
    blocks = {}
    for n in BLOCK_ORDER:
        acc = np.zeros_like(mixtures[0][n])
        for j in selected:
            acc = acc + w[j] * mixtures[j][n]
        blocks[n] = acc
    return TaskVector(mixtures[0].config, blocks)


# ---------------------------------------------------------------------------
# Subspace alignment


@dataclass(frozen=True)
class SARConfig:
    alpha: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in (0, 1], got {self.alpha}")


def rank_threshold(singular_values, alpha: float) -> int:
    """Smallest R whose discarded energy fraction is at most (1 - alpha)^2."""
    s = np.asarray(singular_values, dtype=np.float64)
    if not 0.0 < alpha <= 1.0:
        raise DomainError(f"alpha must lie in (0, 1], got {alpha}")
    energy = s * s
    total = energy.sum()
    if total == 0.0:
        return 1
    # tail[R-1] = energy beyond the first R values, R = 1..len(s)
    tail = np.append(np.cumsum(energy[::-1])[::-1][1:], 0.0)
    limit = (1.0 - alpha) ** 2 * total
    ok = np.flatnonzero(tail <= limit)
    return int(ok[0]) + 1 if ok.size else len(s)


@dataclass(frozen=True)
class SAREntry:
    block: str
    r_alpha: int | None
    sar: float | None  # None when the block is degenerate
    tau_t_norm: float


@dataclass(frozen=True)
class SARReport:
    alpha: float
    entries: tuple[SAREntry, ...]

    def __getitem__(self, block: str) -> SAREntry:
        for e in self.entries:
            if e.block == block:
                return e
        raise KeyError(block)

    def values(self) -> dict[str, float | None]:
        return {e.block: e.sar for e in self.entries}

    def aggregate(self, blocks: Sequence[str] | None = None) -> float | None:
        """Mean of defined block SARs weighted by the target blocks' norms."""
        chosen = [
            e for e in self.entries
            if e.sar is not None and (blocks is None or e.block in blocks)
        ]
        weight = sum(e.tau_t_norm for e in chosen)
        if not chosen or weight == 0:
            return None
        return sum(e.sar * e.tau_t_norm for e in chosen) / weight

    def to_tsv(self) -> str:
        lines = ["block\tR_alpha\tsar"]
        for e in self.entries:
            r = "" if e.r_alpha is None else str(e.r_alpha)
            v = "nan" if e.sar is None else repr(e.sar)
            lines.append(f"{e.block}\t{r}\t{v}")
        return "\n".join(lines) + "\n"


def block_sar(tau_t_block, tau_new_block, alpha: float) -> tuple[int | None, float | None]:
    t = np.asarray(tau_t_block, dtype=np.float64)
    new = np.asarray(tau_new_block, dtype=np.float64)
    if t.ndim == 1:
        t, new = t[:, None], new[:, None]
    t_norm = frobenius_norm(t)
    if t_norm == 0.0 or frobenius_norm(new) == 0.0:
        return None, None
    res = svd(new)
    r = rank_threshold(res.s, alpha)
    U = res.U[:, :r]
    projected = U @ (U.T @ t)
    return r, frobenius_norm(projected) / t_norm


def sar(tau_t: ParamBlocks, tau_new: ParamBlocks, config: SARConfig = SARConfig()) -> SARReport:
    """Per-block share of ``tau_t`` captured by the dominant left subspace of ``tau_new``.

    Bias and attention-vector blocks are treated as single-column matrices.
    Blocks where either vector is zero are reported with ``sar=None``.
    """
    tau_t.check_matched(tau_new)
    entries = []
    for n in BLOCK_ORDER:
        r, value = block_sar(tau_t[n], tau_new[n], config.alpha)
        entries.append(SAREntry(n, r, value, frobenius_norm(tau_t[n])))
    return SARReport(config.alpha, tuple(entries))
