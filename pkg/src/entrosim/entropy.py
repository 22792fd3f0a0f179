"""Entropy bookkeeping for teacher-forced sequences.

All quantities are in nats.  Per-step distributions are rows of a
``(steps, vocab)`` array.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .policy import (PolicyParameters, batch_dists, floored_log,
                     teacher_forced_contexts)

STEP_EXCLUSION = 1e-12


class NoInformativeSteps(ValueError):
    pass


@dataclass
class EntropyReport:
    per_rollout: np.ndarray
    batch_mean: float


@dataclass
class UpdateReport:
    delta_h_exact: float
    delta_h_first_order: float
    advantage: float
    log_likelihood: float
    output_space_baseline: float
    condition_holds: bool
    sign_agrees: bool


def token_entropy(dist) -> float:
    p = np.asarray(dist, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def token_entropies(dists: np.ndarray) -> np.ndarray:
    p = np.asarray(dists, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def sequence_entropy(step_dists) -> float:
    d = np.asarray(step_dists, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] == 0:
        raise ValueError("sequence_entropy needs a nonempty list of step distributions")
    return float(token_entropies(d).mean())


def entropy_report(rollout_dists: Sequence[np.ndarray]) -> EntropyReport:
    per = np.array([sequence_entropy(d) for d in rollout_dists])
    return EntropyReport(per, float(per.mean()) if per.size else float("nan"))


def teacher_forced(params: PolicyParameters, prompt, y) -> np.ndarray:
    return batch_dists(params, teacher_forced_contexts(params, prompt, y))


def exact_entropy_change(params_before: PolicyParameters, params_after: PolicyParameters,
                         prompt, y) -> float:
    """Sequence entropy after minus before, contexts pinned to ``y``."""
    before = teacher_forced(params_before, prompt, y)
    after = teacher_forced(params_after, prompt, y)
    return sequence_entropy(after) - sequence_entropy(before)


def prob_delta(params_before: PolicyParameters, params_after: PolicyParameters,
               prompt, y) -> tuple[np.ndarray, np.ndarray]:
    """``(delta, dists_before)``; each row of ``delta`` sums to zero."""
    before = teacher_forced(params_before, prompt, y)
    after = teacher_forced(params_after, prompt, y)
    return after - before, before


def first_order_prediction(delta: np.ndarray, dists_before: np.ndarray) -> float:
    delta = np.asarray(delta)
    return float(-(delta * floored_log(dists_before)).sum() / delta.shape[0])


def output_space_baseline(delta: np.ndarray, dists_before: np.ndarray, y) -> float:
    """Log-space threshold the sequence log-likelihood is compared against.

    Steps whose sampled-token change is below ``STEP_EXCLUSION`` in magnitude
    are skipped; the ratio is undefined there.
    """
    delta = np.asarray(delta)
    logp = floored_log(dists_before)
    total = 0.0
    used = 0
    for t, tok in enumerate(y):
        d_tok = delta[t, tok]
        if abs(d_tok) < STEP_EXCLUSION:
            continue
        ratios = delta[t] / d_tok
        others = np.arange(delta.shape[1]) != tok
        total -= float((ratios[others] * logp[t, others]).sum())
        used += 1
    if used == 0:
        raise NoInformativeSteps("no informative steps")
    return total


def baseline_product_form(delta: np.ndarray, dists_before: np.ndarray, y) -> float:
    """log of prod_t prod_{i != y_t} p_{t,i}^(-delta_i / delta_{y_t}), term by term."""
    out = 0.0
    for t, tok in enumerate(y):
        if abs(delta[t, tok]) < STEP_EXCLUSION:
            continue
        for i in range(delta.shape[1]):
            if i == tok:
                continue
            out += np.log(max(dists_before[t, i], 1e-12) ** (-delta[t, i] / delta[t, tok]))
    return out


def update_report(params_before: PolicyParameters, params_after: PolicyParameters,
                  prompt, y, advantage: float) -> UpdateReport:
    delta, before = prob_delta(params_before, params_after, prompt, y)
    after = before + delta
    dh = sequence_entropy(after) - sequence_entropy(before)
    pred = first_order_prediction(delta, before)
    ll = float(floored_log(before[np.arange(len(y)), np.asarray(y)]).sum())
    try:
        base = output_space_baseline(delta, before, y)
    except NoInformativeSteps:
        base = float("inf")
    return UpdateReport(dh, pred, float(advantage), ll, base, bool(ll >= base),
                        bool(advantage * dh <= 0.0))


def expected_entropy_exhaustive(params: PolicyParameters, prompt, max_len: int) -> float:
    """E_y[sequence entropy] by enumerating every completion up to ``max_len``.

    Completions stop at end-of-sequence.  Only for small vocabularies.
    """
    vocab = params.vocab
    if vocab.size > 8 or max_len > 3:
        raise ValueError("exhaustive mode is limited to |V| <= 8 and max_len <= 3")
    total = 0.0
    seen = set()
    for seq in itertools.product(range(vocab.size), repeat=max_len):
        y = list(seq)
        if vocab.eos in y:
            y = y[:y.index(vocab.eos) + 1]
        key = tuple(y)
        if key in seen:
            continue
        seen.add(key)
        d = teacher_forced(params, prompt, y)
        prob = float(np.prod(d[np.arange(len(y)), y]))
        total += prob * sequence_entropy(d)
    return total
