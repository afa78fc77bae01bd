"""Discrete-time survival: hazard NLL, risk summary and concordance index."""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import StructureError, UndefinedMetricError

HAZARD_EPS = 1e-7


@dataclass(frozen=True)
class SurvLabel:
    time_bin: int
    event: int  # 1 = event observed, 0 = censored

    def __post_init__(self):
        if self.time_bin < 0:
            raise StructureError(f"time_bin must be >= 0, got {self.time_bin}")
        if self.event not in (0, 1):
            raise StructureError(f"event must be 0 or 1, got {self.event}")


def _check(logits, label: SurvLabel) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= label.time_bin < logits.size:
        raise StructureError(
            f"time_bin {label.time_bin} out of range for {logits.size} bins"
        )
    return logits


def nll_loss_and_grad(logits, label: SurvLabel) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of a discrete-hazard model and its logit gradient.

    Hazards are ``sigmoid(logits)`` clamped to ``[1e-7, 1 - 1e-7]``.  An event
    at bin ``y`` contributes ``-log h_y - sum_{k<y} log(1 - h_k)``; a censored
    observation at ``y`` survives bins ``0..y`` inclusive.
    """
    logits = _check(logits, label)
    y = label.time_bin
    raw = expit(logits)
    h = np.clip(raw, HAZARD_EPS, 1.0 - HAZARD_EPS)
    live = (raw > HAZARD_EPS) & (raw < 1.0 - HAZARD_EPS)
    grad = np.zeros_like(logits)
    # d(-log(1-h))/dz = h ; d(-log h)/dz = -(1-h)
    if label.event:
        loss = -np.log(h[y]) - np.sum(np.log1p(-h[:y]))
        grad[:y] = h[:y]
        grad[y] = -(1.0 - h[y])
    else:
        loss = -np.sum(np.log1p(-h[: y + 1]))
        grad[: y + 1] = h[: y + 1]
    grad = np.where(live, grad, 0.0)
    return float(loss), grad


def nll_loss(logits, label: SurvLabel) -> float:
    return nll_loss_and_grad(logits, label)[0]


def risk_from_hazards(logits) -> float:
    """Sum of per-bin hazards; larger means worse prognosis."""
    return float(np.sum(expit(np.asarray(logits, dtype=np.float64))))


def concordance_index(risks, labels: Sequence[SurvLabel]) -> float:
    """Harrell's C over pairs (i, j) with an event at i and t_i < t_j.

    A pair earns 1 if risk_i > risk_j and 0.5 on a tie.
    """
    risks = np.asarray(risks, dtype=np.float64).reshape(-1)
    times = np.array([lab.time_bin for lab in labels])
    events = np.array([lab.event for lab in labels])
    if risks.size != times.size:
        raise StructureError("risks and labels differ in length")
    if risks.size < 2:
        raise UndefinedMetricError("concordance index needs at least two samples")
    comparable = (events[:, None] == 1) & (times[:, None] < times[None, :])
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise UndefinedMetricError("no comparable pairs")
    higher = int((comparable & (risks[:, None] > risks[None, :])).sum())
    ties = int((comparable & (risks[:, None] == risks[None, :])).sum())
    return (higher + 0.5 * ties) / n_pairs
