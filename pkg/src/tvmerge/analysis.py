"""Diagnostics: merge-coefficient loss landscapes, mixup sweeps, trajectory overlays."""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import StructureError
from .linalg import gaussian_smooth_2d
from .nn import BLOCK_ORDER, Bag, ModelWeights, mean_loss
from .steph import TrajectoryLog
from .taskvec import SARConfig, TaskVector, apply, mixup, sar


def coefficient_axis(step: float) -> np.ndarray:
    """Points 0, step, ..., 1; ``step`` must divide 1."""
    if step <= 0 or step > 1:
        raise StructureError(f"step must lie in (0, 1], got {step}")
    intervals = round(1.0 / step)
    if abs(intervals * step - 1.0) > 1e-9:
        raise StructureError(f"step {step} does not divide [0, 1]")
    return np.linspace(0.0, 1.0, intervals + 1)


@dataclass
class LandscapeGrid:
    c_s: np.ndarray  # row axis
    c_t: np.ndarray  # column axis
    raw: np.ndarray  # loss[i, j] at (c_s[i], c_t[j]) before smoothing
    loss: np.ndarray  # smoothed
    sigma: float
    split: str
    tau_s_fingerprint: str
    tau_t_fingerprint: str

    def to_tsv(self, smoothed: bool = True) -> str:
        values = self.loss if smoothed else self.raw
        lines = ["C_s\\C_t\t" + "\t".join(f"{c:.2f}" for c in self.c_t)]
        for cs, row in zip(self.c_s, values):
            lines.append(f"{cs:.2f}\t" + "\t".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def merged_model(m_zero: ModelWeights, tau_s: TaskVector, tau_t: TaskVector, c_s: float, c_t: float) -> ModelWeights:
    m_zero.check_matched(tau_s)
    m_zero.check_matched(tau_t)
    return ModelWeights(
        m_zero.config,
        {n: m_zero[n] + c_s * tau_s[n] + c_t * tau_t[n] for n in BLOCK_ORDER},
    )


def loss_landscape(
    m_zero: ModelWeights,
    tau_s: TaskVector,
    tau_t: TaskVector,
    bags: Sequence[Bag],
    step: float = 0.04,
    sigma: float = 1.0,
    split: str = "test",
) -> LandscapeGrid:
    """Mean NLL of ``M0 + C_s tau_s + C_t tau_t`` over a grid in [0, 1]^2."""
    bags = list(getattr(bags, "bags", bags))
    if not bags:
        raise StructureError("landscape needs a non-empty dataset")
    axis = coefficient_axis(step)
    raw = np.empty((axis.size, axis.size))
    for i, cs in enumerate(axis):
        for j, ct in enumerate(axis):
            raw[i, j] = mean_loss(merged_model(m_zero, tau_s, tau_t, cs, ct), bags)
    return LandscapeGrid(
        axis, axis.copy(), raw, gaussian_smooth_2d(raw, sigma), sigma, split,
        tau_s.fingerprint(), tau_t.fingerprint(),
    )


@dataclass(frozen=True)
class SweepRow:
    lam: float
    train_loss: float
    test_loss: float
    sar: dict  # block name -> SAR of tau_mix against tau_t (None if undefined)


def tvm_sweep(
    m_zero: ModelWeights,
    tau_t: TaskVector,
    tau_s: TaskVector,
    train_bags: Sequence[Bag],
    test_bags: Sequence[Bag],
    lambda_grid: Sequence[float],
    sar_alpha: float = 0.95,
) -> list[SweepRow]:
    """Losses of ``M0 + tau_mix(lambda)`` and per-block SAR(tau_t, tau_mix)."""
    config = SARConfig(sar_alpha)
    rows = []
    for lam in lambda_grid:
        tau_mix = mixup(tau_t, tau_s, float(lam))
        model = apply(m_zero, tau_mix, 1.0)
        rows.append(SweepRow(
            float(lam), mean_loss(model, train_bags), mean_loss(model, test_bags),
            sar(tau_t, tau_mix, config).values(),
        ))
    return rows


def sweep_to_tsv(rows: Sequence[SweepRow]) -> str:
    blocks = list(rows[0].sar) if rows else list(BLOCK_ORDER)
    lines = ["lambda\ttrain_loss\ttest_loss\t" + "\t".join(f"sar:{b}" for b in blocks)]
    for r in rows:
        sars = ["nan" if r.sar[b] is None else repr(r.sar[b]) for b in blocks]
        lines.append(f"{r.lam!r}\t{r.train_loss!r}\t{r.test_loss!r}\t" + "\t".join(sars))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class TrajectoryPoint:
    epoch: int
    lam: float
    w: float
    c_t: float
    c_s: float
    clipped: bool


def overlay_trajectory(landscape: LandscapeGrid, trajectory: TrajectoryLog) -> list[TrajectoryPoint]:
    """Place each epoch's mean (lambda, w) on the landscape.

    Uses ``w * tau_mix = (w lambda) tau_t + (w (1 - lambda)) tau_s``, i.e.
    ``(C_t, C_s) = (w lambda, w (1 - lambda))``, clipped to [0, 1].
    """
    if len(trajectory.source_fingerprints) != 1:
        raise StructureError("overlay needs a single-source trajectory")
    if (
        trajectory.tau_t_fingerprint != landscape.tau_t_fingerprint
        or trajectory.source_fingerprints[0] != landscape.tau_s_fingerprint
    ):
        raise StructureError("trajectory and landscape were built from different task vectors")
    points = []
    for epoch, lam, w in sorted((e, l, w) for e, _, l, w in trajectory.rows):
        ct, cs = w * lam, w * (1.0 - lam)
        ct_c, cs_c = min(max(ct, 0.0), 1.0), min(max(cs, 0.0), 1.0)
        points.append(TrajectoryPoint(epoch, lam, w, ct_c, cs_c, (ct_c, cs_c) != (ct, cs)))
    return points


def trajectory_to_tsv(points: Sequence[TrajectoryPoint]) -> str:
    lines = ["epoch\tlambda\tw\tC_t\tC_s\tclipped"]
    lines += [
        f"{p.epoch}\t{p.lam!r}\t{p.w!r}\t{p.c_t!r}\t{p.c_s!r}\t{int(p.clipped)}" for p in points
    ]
    return "\n".join(lines) + "\n"
