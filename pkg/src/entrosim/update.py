"""Policy-gradient assembly: surrogates, KL penalty, entropy bonus, SGD step.

Every objective here is a sum of per-token terms ``f(log pi_t)`` plus
per-context regularisers, so each gradient reduces to a ``dlogits`` array fed
through :func:`backprop_logits`.  The matching scalar objectives are exposed
for finite-difference checks.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .policy import (PROB_FLOOR, ContextBatch, PolicyParameters, apply_update,
                     backprop_logits, batch_dists, floored_log, teacher_forced_contexts)
from .tasks import Group, Rollout

OBJECTIVES = ("plain-pg", "grpo-clipped", "gspo-clipped")


@dataclass
class UpdateConfig:
    objective: str = "grpo-clipped"
    eps_low: float = 0.2
    eps_high: float = 0.2
    lr: float = 0.1
    kl_coef: float = 1e-3
    length_norm: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.lr <= 0:
            raise ValueError("update.lr must be > 0")
        if self.kl_coef < 0:
            raise ValueError("update.kl_coef must be >= 0")
        if not (0 < self.eps_low < 1 and 0 < self.eps_high):
            raise ValueError("clip ranges need 0 < eps_low < 1 and eps_high > 0")


@dataclass
class StepGradient:
    grad: np.ndarray
    mean_ratio: float = 1.0
    clip_fraction: float = 0.0
    grad_norm: float = 0.0
    extras: dict = field(default_factory=dict)


@dataclass
class TokenBatch:
    """Flattened tokens of the rollouts that enter the surrogate."""

    cb: ContextBatch
    tokens: np.ndarray
    seq: np.ndarray            # owning sequence, per token
    seq_adv: np.ndarray        # advantage, per sequence
    seq_weight: np.ndarray     # 1/|S_x| (and 1/|y| with length_norm), per sequence
    seq_len: np.ndarray
    old_logp: np.ndarray       # sampler log-prob, per token
    keep: np.ndarray           # token-level mask, per token

    @property
    def n_seq(self) -> int:
        return self.seq_adv.size


def _contexts_for(params: PolicyParameters, prompt_tokens, y) -> tuple[np.ndarray, np.ndarray]:
    k = params.window
    full = list(prompt_tokens) + list(y)
    n0 = len(prompt_tokens)
    window = np.full((len(y), k), -1, dtype=np.int64)
    for t in range(len(y)):
        tail = full[max(0, n0 + t - k):n0 + t]
        if tail:
            window[t, k - len(tail):] = tail
    return window, np.arange(len(y), dtype=np.int64)


def rollout_contexts(params: PolicyParameters, items: Sequence[tuple[tuple, Rollout]]) -> ContextBatch:
    windows, positions = [], []
    for prompt_tokens, ro in items:
        w, p = _contexts_for(params, prompt_tokens, ro.y)
        windows.append(w)
        positions.append(p)
    if not windows:
        return ContextBatch(np.zeros((0, params.window), dtype=np.int64),
                            np.zeros(0, dtype=np.int64))
    return ContextBatch(np.concatenate(windows), np.concatenate(positions))


def token_batch(params: PolicyParameters, groups: Sequence[Group],
                selections: Sequence[Sequence[int]], length_norm: bool = False,
                advantages: Optional[Sequence[np.ndarray]] = None) -> TokenBatch:
    """Flatten the selected rollouts of each group.

    Group ``g`` contributes ``selections[g]`` with weight ``1/len(selections[g])``;
    empty selections contribute nothing.  Advantages default to the values stored
    on the rollouts.
    """
    items, adv, weight, lens, old = [], [], [], [], []
    for g, (group, sel) in enumerate(zip(groups, selections)):
        if not sel:
            continue
        for i in sel:
            ro = group.rollouts[i]
            items.append((group.prompt.tokens, ro))
            a = ro.advantage if advantages is None else advantages[g][i]
            adv.append(a)
            w = 1.0 / len(sel)
            if length_norm:
                w /= len(ro.y)
            weight.append(w)
            lens.append(len(ro.y))
            sd = ro.step_dists
            old.append(floored_log(sd[np.arange(len(ro.y)), np.asarray(ro.y)]))
    cb = rollout_contexts(params, items)
    lens_a = np.array(lens, dtype=np.int64)
    tokens = np.concatenate([np.asarray(ro.y) for _, ro in items]) if items else np.zeros(0, np.int64)
    return TokenBatch(
        cb=cb,
        tokens=tokens.astype(np.int64),
        seq=np.repeat(np.arange(len(items)), lens_a),
        seq_adv=np.array(adv, dtype=np.float64),
        seq_weight=np.array(weight, dtype=np.float64),
        seq_len=lens_a,
        old_logp=np.concatenate(old) if old else np.zeros(0),
        keep=np.ones(len(tokens), dtype=bool),
    )


# ---------------------------------------------------------------------------
# ratios


def importance_ratios(learner: PolicyParameters, sampler: PolicyParameters, prompt_tokens,
                      rollout: Rollout, counter: Optional[Counter] = None) -> np.ndarray:
    cb = teacher_forced_contexts(learner, prompt_tokens, rollout.y)
    idx = (np.arange(len(rollout.y)), np.asarray(rollout.y))
    p_new = batch_dists(learner, cb)[idx]
    p_old = batch_dists(sampler, cb)[idx]
    low = p_old < PROB_FLOOR
    if counter is not None and low.any():
        counter["sampler_floor"] += int(low.sum())
    return np.maximum(p_new, PROB_FLOOR) / np.maximum(p_old, PROB_FLOOR)


def gspo_ratio(learner: PolicyParameters, sampler: PolicyParameters, prompt_tokens,
               rollout: Rollout) -> float:
    """Length-normalised sequence ratio exp(mean_t(log pi - log pi_sampler))."""
    cb = teacher_forced_contexts(learner, prompt_tokens, rollout.y)
    idx = (np.arange(len(rollout.y)), np.asarray(rollout.y))
    diff = floored_log(batch_dists(learner, cb)[idx]) - floored_log(batch_dists(sampler, cb)[idx])
    return float(np.exp(diff.mean()))


# ---------------------------------------------------------------------------
# surrogate


def _learner_terms(params: PolicyParameters, tb: TokenBatch):
    p = batch_dists(params, tb.cb)
    logp = floored_log(p[np.arange(len(tb.tokens)), tb.tokens])
    return p, logp


def _seq_mean(values: np.ndarray, tb: TokenBatch) -> np.ndarray:
    return np.bincount(tb.seq, weights=values, minlength=tb.n_seq) / np.maximum(tb.seq_len, 1)


def _surrogate_parts(cfg: UpdateConfig, tb: TokenBatch, logp: np.ndarray,
                     eps_high: Optional[float]):
    """Per-token objective values, d(objective)/d(log pi_t), ratios and clip flags."""
    eh = cfg.eps_high if eps_high is None else eps_high
    lo, hi = 1.0 - cfg.eps_low, 1.0 + eh
    adv_t = tb.seq_adv[tb.seq]
    w_t = tb.seq_weight[tb.seq] * tb.keep
    if cfg.objective == "plain-pg":
        value = w_t * adv_t * logp
        coef = w_t * adv_t
        return value, coef, np.ones_like(logp), np.zeros(logp.shape, dtype=bool)
    if cfg.objective == "grpo-clipped":
        ratio = np.exp(logp - tb.old_logp)
    else:
        s = np.exp(_seq_mean(logp - tb.old_logp, tb))
        ratio = s[tb.seq]
    unclipped = ratio * adv_t
    clipped = np.clip(ratio, lo, hi) * adv_t
    use_clip = clipped < unclipped
    value = w_t * np.minimum(unclipped, clipped)
    if cfg.objective == "grpo-clipped":
        coef = np.where(use_clip, 0.0, w_t * ratio * adv_t)
    else:
        # d/dlogpi_t of sum_tau w keep_tau s A = w A s (sum_tau keep_tau) / |y|
        kept = np.bincount(tb.seq, weights=tb.keep.astype(float), minlength=tb.n_seq)
        seq_coef = tb.seq_weight * tb.seq_adv * np.exp(_seq_mean(logp - tb.old_logp, tb)) \
            * kept / np.maximum(tb.seq_len, 1)
        seq_clip = np.bincount(tb.seq, weights=use_clip.astype(float), minlength=tb.n_seq) > 0
        coef = np.where(seq_clip[tb.seq], 0.0, seq_coef[tb.seq])
    return value, coef, ratio, use_clip


def surrogate_objective(params: PolicyParameters, tb: TokenBatch, cfg: UpdateConfig,
                        eps_high: Optional[float] = None) -> float:
    if len(tb.tokens) == 0:
        return 0.0
    _, logp = _learner_terms(params, tb)
    value, _, _, _ = _surrogate_parts(cfg, tb, logp, eps_high)
    return float(value.sum())


def clipped_surrogate_gradient(params: PolicyParameters, tb: TokenBatch, cfg: UpdateConfig,
                               eps_high: Optional[float] = None) -> StepGradient:
    """Gradient of the (clipped) surrogate over the flattened selected rollouts."""
    if len(tb.tokens) == 0:
        return StepGradient(np.zeros_like(params.theta))
    p, logp = _learner_terms(params, tb)
    _, coef, ratio, use_clip = _surrogate_parts(cfg, tb, logp, eps_high)
    dz = -p * coef[:, None]
    dz[np.arange(len(tb.tokens)), tb.tokens] += coef
    grad = backprop_logits(params, tb.cb, dz)
    return StepGradient(grad, float(ratio.mean()), float(use_clip.mean()),
                        float(np.linalg.norm(grad)))


# ---------------------------------------------------------------------------
# regularisers over rollout contexts


def kl_value(params: PolicyParameters, reference: PolicyParameters, cb: ContextBatch) -> float:
    if len(cb) == 0:
        return 0.0
    p = batch_dists(params, cb)
    q = batch_dists(reference, cb)
    return float((p * (floored_log(p) - floored_log(q))).sum(axis=1).mean())


def kl_penalty_gradient(params: PolicyParameters, reference: PolicyParameters,
                        cb: ContextBatch) -> np.ndarray:
    """Gradient of the token-mean KL(pi || pi_ref) over the contexts in ``cb``."""
    if len(cb) == 0:
        return np.zeros_like(params.theta)
    p = batch_dists(params, cb)
    lr_ = floored_log(p) - floored_log(batch_dists(reference, cb))
    kl = (p * lr_).sum(axis=1, keepdims=True)
    dz = p * (lr_ - kl) / len(cb)
    return backprop_logits(params, cb, dz)


def entropy_value(params: PolicyParameters, cb: ContextBatch) -> float:
    if len(cb) == 0:
        return 0.0
    p = batch_dists(params, cb)
    return float(-(p * floored_log(p)).sum(axis=1).mean())


def entropy_gradient(params: PolicyParameters, cb: ContextBatch) -> np.ndarray:
    """Gradient of the token-mean entropy over ``cb``."""
    if len(cb) == 0:
        return np.zeros_like(params.theta)
    p = batch_dists(params, cb)
    logp = floored_log(p)
    h = -(p * logp).sum(axis=1, keepdims=True)
    dz = -p * (logp + h) / len(cb)
    return backprop_logits(params, cb, dz)


def compose_and_apply(params: PolicyParameters, lr: float,
                      *pieces: np.ndarray) -> tuple[PolicyParameters, StepGradient]:
    """Sum ascent-direction pieces and take one SGD step."""
    total = np.zeros_like(params.theta)
    for piece in pieces:
        total = total + piece
    if not np.all(np.isfinite(total)):
        raise FloatingPointError("non-finite gradient; step aborted")
    return apply_update(params, total, lr), StepGradient(total, grad_norm=float(np.linalg.norm(total)))
