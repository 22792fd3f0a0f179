"""Group reward vectors to per-rollout advantages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ESTIMATOR_KINDS = ("group-normalized", "positive-only", "negative-only")


@dataclass
class AdvantageVector:
    values: np.ndarray
    mask: np.ndarray  # False = rollout excluded from the objective
    degenerate: bool = False


def estimate(kind: str, rewards) -> AdvantageVector:
    """Advantages for one group.

    ``group-normalized`` is (r - mean) / population std, all zero when the std
    vanishes.  ``positive-only`` keeps rollouts whose reward beats the group
    mean, with the raw reward as advantage.  ``negative-only`` keeps incorrect
    rollouts with advantage -(1 - r).
    """
    r = np.asarray(rewards, dtype=np.float64)
    g = r.size
    degenerate = bool(g == 0 or np.all(r == r[0]))
    if kind == "group-normalized":
        if g < 2:
            raise ValueError("group-normalized advantages need a group of at least 2")
        std = r.std()
        if std == 0.0:
            return AdvantageVector(np.zeros(g), np.ones(g, dtype=bool), True)
        return AdvantageVector((r - r.mean()) / std, np.ones(g, dtype=bool), degenerate)
    if kind == "positive-only":
        keep = r > r.mean()
        return AdvantageVector(np.where(keep, r, 0.0), keep, degenerate)
    if kind == "negative-only":
        keep = r < 1.0
        return AdvantageVector(np.where(keep, -(1.0 - r), 0.0), keep, degenerate)
    raise ValueError(f"unknown estimator kind {kind!r}; expected one of {ESTIMATOR_KINDS}")
