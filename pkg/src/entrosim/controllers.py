"""Entropy schedules, the rejection-sampling filter and baseline modifiers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tasks import Group

SCHEDULE_FAMILIES = ("constant", "linear", "cosine")
CONTROLLER_KINDS = ("none", "entrocraft", "entropy-loss", "clip-higher", "clip-cov",
                    "w-reinforce", "entropic")


@dataclass(frozen=True)
class EntropyBand:
    h_low: float
    h_high: float

    @property
    def mid(self) -> float:
        return 0.5 * (self.h_low + self.h_high)


@dataclass(frozen=True)
class EntropySchedule:
    family: str = "constant"
    start_target: float = 0.8
    end_target: float = 0.8
    band_halfwidth: float = 0.05
    max_entropy: float = math.log(16)

    def __post_init__(self):
        if self.family not in SCHEDULE_FAMILIES:
            raise ValueError(f"unknown schedule family {self.family!r}")
        if self.band_halfwidth <= 0:
            raise ValueError("band_halfwidth must be > 0")
        for v in (self.start_target, self.end_target):
            if not 0.0 <= v <= self.max_entropy + 1e-12:
                raise ValueError(f"entropy target {v} outside [0, {self.max_entropy:.4f}]")
        if self.family == "constant" and self.start_target != self.end_target:
            raise ValueError("constant schedule needs start_target == end_target")

    def target(self, progress: float) -> float:
        s, e = self.start_target, self.end_target
        if self.family == "constant":
            return s
        if self.family == "linear":
            return s + (e - s) * progress
        return e + (s - e) * (1.0 + math.cos(math.pi * progress)) / 2.0


def target_band(schedule: EntropySchedule, progress: float) -> EntropyBand:
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress {progress} outside [0, 1]")
    t = schedule.target(progress)
    w = schedule.band_halfwidth
    return EntropyBand(max(0.0, t - w), min(schedule.max_entropy, t + w))


def out_of_range_indicator(batch_entropy: float, band: EntropyBand) -> int:
    return int(batch_entropy > band.h_high) - int(batch_entropy < band.h_low)


def acceptance_probability(m: int, advantage: float, gamma: float) -> float:
    return min(1.0, math.exp(gamma * m * advantage))


def filter_group(group: Group, m: int, gamma: float, u: np.ndarray) -> list[int]:
    """Indices of the accepted rollouts; sets each rollout's ``accepted`` flag.

    ``u`` holds one Uniform[0, 1) draw per rollout.  Advantages are read, never
    modified.
    """
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    accepted = []
    for i, (ro, draw) in enumerate(zip(group.rollouts, u)):
        ro.accepted = bool(draw <= math.exp(gamma * m * ro.advantage))
        if ro.accepted:
            accepted.append(i)
    return accepted


def rejected_objective_scope(group: Group, mask: Optional[Sequence[bool]] = None) -> list[int]:
    """Rollouts that contribute to the gradient: accepted and not masked out."""
    mask = [True] * len(group.rollouts) if mask is None else mask
    return [i for i, ro in enumerate(group.rollouts) if ro.accepted and mask[i]]


# ---------------------------------------------------------------------------
# baselines


@dataclass
class ControllerConfig:
    kind: str = "none"
    gamma: float = 10.0
    beta: float = 0.0
    eps_high: float = 0.28
    clip_fraction: float = 0.02
    lam: float = 0.1
    alpha_gain: float = 1.0

    def __post_init__(self):
        if not isinstance(self.kind, str):
            raise ValueError(f"exactly one controller kind may be active, got {self.kind!r}")
        if self.kind not in CONTROLLER_KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}; "
                             f"expected one of {CONTROLLER_KINDS}")


@dataclass
class PipelineHooks:
    """What a controller changes in the update pipeline.

    ``reweight`` maps (rewards, batch_entropy, target) to replacement advantages
    for decoupled positive/negative objectives.  ``token_mask`` receives the
    flat per-token log-probs and advantages of the batch and returns a boolean
    keep-mask.
    """

    eps_high: Optional[float] = None
    entropy_coef: float = 0.0
    reweight: Optional[Callable[[np.ndarray, float, float], np.ndarray]] = None
    token_mask: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    rejection: bool = False


def entropic_alpha(batch_entropy: float, target: float, gain: float) -> float:
    # positive alpha favours positives, which lowers entropy
    return float(np.clip(gain * (batch_entropy - target), -0.9, 0.9))


def decoupled_coefficients(rewards: np.ndarray, pos_weight: float, neg_weight: float) -> np.ndarray:
    return np.where(np.asarray(rewards) > 0.5, pos_weight, -neg_weight)


def clip_cov_mask(logp: np.ndarray, adv: np.ndarray, fraction: float) -> np.ndarray:
    """Drop the top ``fraction`` of tokens by (logp - mean logp) * advantage."""
    keep = np.ones(logp.shape, dtype=bool)
    n_drop = int(math.floor(fraction * logp.size))
    if n_drop == 0:
        return keep
    score = (logp - logp.mean()) * adv
    order = np.argsort(-score, kind="stable")
    keep[order[:n_drop]] = False
    return keep


def baseline_modifier(kind: str, cfg: ControllerConfig) -> PipelineHooks:
    if not isinstance(kind, str):
        raise ValueError(f"exactly one controller kind may be active, got {kind!r}")
    if kind == "none":
        return PipelineHooks()
    if kind == "entrocraft":
        return PipelineHooks(rejection=True)
    if kind == "entropy-loss":
        return PipelineHooks(entropy_coef=cfg.beta)
    if kind == "clip-higher":
        return PipelineHooks(eps_high=cfg.eps_high)
    if kind == "clip-cov":
        frac = cfg.clip_fraction
        return PipelineHooks(token_mask=lambda logp, adv: clip_cov_mask(logp, adv, frac))
    if kind == "w-reinforce":
        lam = cfg.lam
        return PipelineHooks(reweight=lambda r, h, t: decoupled_coefficients(r, lam, 1.0))
    if kind == "entropic":
        gain = cfg.alpha_gain

        def reweight(r, h, t):
            a = entropic_alpha(h, t, gain)
            return decoupled_coefficients(r, 1.0 + a, 1.0 - a)

        return PipelineHooks(reweight=reweight)
    raise ValueError(f"unknown controller kind {kind!r}")
