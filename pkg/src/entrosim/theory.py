"""Experiments that measure the entropy-change sign law on real updates.

A trial draws a prompt, samples a group from the policy under test, estimates
advantages, and applies one plain policy-gradient step from a single rollout.
The resulting :class:`~entrosim.entropy.UpdateReport` says whether the
likelihood-vs-baseline condition held and whether the sign of the exact
entropy change opposed the advantage.

Each trial owns a counter-based stream keyed by its index, so a trial sees the
same prompt and rollout at every learning rate in the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .advantages import ESTIMATOR_KINDS, estimate
from .entropy import UpdateReport, update_report
from .policy import PolicyParameters, apply_update, logprob_gradient
from .rng import TRIAL, StreamFactory
from .tasks import Prompt, TaskSpec, generate_prompt, sample_batch
from .trainer import PolicyConfig, RunConfig, initial_policy, train

TRIAL_HEADER = ("trial", "lr", "estimator", "advantage", "log_likelihood", "baseline",
                "condition", "dH_exact", "dH_pred", "sign_agrees")
SUMMARY_HEADER = ("estimator", "lr", "trials", "condition_rate", "agreement_given_condition",
                  "mean_log_likelihood", "mean_baseline")
GAP_HEADER = ("step", "pos_ll", "neg_ll", "gap")

# rollout streams of the harness live far from training steps
_STREAM_BASE = 3 << 40
_MAX_ATTEMPTS = 200


@dataclass
class TheorySettings:
    """Trial setup.  The policy under test is built exactly as a training run
    would build its initial policy from ``policy`` and ``task``."""

    seed: int = 0
    task: TaskSpec = field(default_factory=TaskSpec)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    estimators: tuple[str, ...] = ESTIMATOR_KINDS
    lr_grid: tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    trials: int = 1000
    group_size: int = 8
    max_len: int = 2

    def with_policy(self, **changes) -> "TheorySettings":
        return replace(self, policy=replace(self.policy, **changes))


def trial_policy(settings: TheorySettings) -> PolicyParameters:
    return initial_policy(RunConfig(task=settings.task, policy=settings.policy),
                          StreamFactory(settings.seed))


@dataclass
class TrialDraw:
    """Everything a trial needs before the learning rate is chosen."""

    params: PolicyParameters
    prompt: Prompt
    y: tuple[int, ...]
    advantage: float
    grad: np.ndarray


@dataclass
class TrialRecord:
    trial: int
    lr: float
    estimator: str
    report: UpdateReport

    def values(self) -> tuple:
        r = self.report
        return (self.trial, self.lr, self.estimator, r.advantage, r.log_likelihood,
                r.output_space_baseline, int(r.condition_holds), r.delta_h_exact,
                r.delta_h_first_order, int(r.sign_agrees))


@dataclass
class SignSummary:
    estimator: str
    lr: float
    trials: int
    condition_rate: float
    agreement_given_condition: float
    mean_log_likelihood: float
    mean_baseline: float

    def values(self) -> tuple:
        return (self.estimator, self.lr, self.trials, self.condition_rate,
                self.agreement_given_condition, self.mean_log_likelihood, self.mean_baseline)


def draw_trial(settings: TheorySettings, params: PolicyParameters, estimator: str,
               trial: int, streams: StreamFactory) -> TrialDraw:
    """A prompt and one of its rollouts with a nonzero advantage.

    Groups whose estimator leaves every rollout at zero (all-equal rewards
    under group normalisation, no winner for positive-only, no loser for
    negative-only) carry no update and are redrawn.
    """
    est_id = ESTIMATOR_KINDS.index(estimator)
    vocab = params.vocab
    for attempt in range(_MAX_ATTEMPTS):
        rng = streams.generator(TRIAL, trial, est_id, attempt)
        prompt = generate_prompt(settings.task, vocab.size, vocab.eos, rng)
        step = _STREAM_BASE + trial * _MAX_ATTEMPTS + attempt
        group = sample_batch(params, [prompt], [est_id], settings.group_size,
                             settings.max_len, 1.0, streams, step)[0]
        adv = estimate(estimator, group.rewards)
        usable = [i for i in range(len(group.rollouts)) if adv.mask[i] and adv.values[i] != 0.0]
        if not usable:
            continue
        i = usable[int(rng.integers(len(usable)))]
        ro = group.rollouts[i]
        grad = logprob_gradient(params, prompt.tokens, ro.y)
        return TrialDraw(params, prompt, tuple(ro.y), float(adv.values[i]), grad)
    raise RuntimeError(f"trial {trial}: no informative group in {_MAX_ATTEMPTS} draws; "
                       "the policy is too deterministic for this estimator")


def draw_trials(settings: TheorySettings, estimator: str, trials: Optional[int] = None,
                params: Optional[PolicyParameters] = None) -> list[TrialDraw]:
    params = trial_policy(settings) if params is None else params
    streams = StreamFactory(settings.seed)
    n = settings.trials if trials is None else trials
    return [draw_trial(settings, params, estimator, t, streams) for t in range(n)]


def run_trial(draw: TrialDraw, lr: float) -> UpdateReport:
    """One plain policy-gradient step, lr * advantage * grad log pi(y)."""
    after = apply_update(draw.params, draw.advantage * draw.grad, lr)
    return update_report(draw.params, after, draw.prompt.tokens, draw.y, draw.advantage)


def sign_agreement_experiment(settings: TheorySettings) -> tuple[list[TrialRecord], list[SignSummary]]:
    """Per-trial records and one summary row per (estimator, lr)."""
    params = trial_policy(settings)
    records: list[TrialRecord] = []
    summaries: list[SignSummary] = []
    for estimator in settings.estimators:
        draws = draw_trials(settings, estimator, params=params)
        for lr in settings.lr_grid:
            reports = [run_trial(d, lr) for d in draws]
            records.extend(TrialRecord(t, lr, estimator, r) for t, r in enumerate(reports))
            summaries.append(summarize(estimator, lr, reports))
    return records, summaries


def summarize(estimator: str, lr: float, reports: Sequence[UpdateReport]) -> SignSummary:
    held = [r for r in reports if r.condition_holds]
    agree = float(np.mean([r.sign_agrees for r in held])) if held else 1.0
    finite = [r.output_space_baseline for r in reports if math.isfinite(r.output_space_baseline)]
    return SignSummary(
        estimator, lr, len(reports),
        len(held) / len(reports) if reports else float("nan"),
        agree,
        float(np.mean([r.log_likelihood for r in reports])) if reports else float("nan"),
        float(np.mean(finite)) if finite else float("nan"),
    )


def taylor_order_ratios(settings: TheorySettings, lr: float, trials: int = 100,
                        estimator: str = "group-normalized") -> tuple[float, float]:
    """Median first-order error at ``lr`` and ``lr / 2`` over the same updates.

    The prediction uses the realised probability change, so what remains is
    the curvature of the entropy; it should scale with the square of ``lr``.
    """
    draws = draw_trials(settings, estimator, trials)
    errs = []
    for rate in (lr, lr / 2):
        reports = [run_trial(d, rate) for d in draws]
        errs.append(float(np.median([abs(r.delta_h_exact - r.delta_h_first_order)
                                     for r in reports])))
    return errs[0], errs[1]


def condition_rate_by_vocab(settings: TheorySettings, sizes: Sequence[int], lr: float,
                            estimator: str = "group-normalized") -> list[tuple[int, float, float]]:
    """(|V|, condition rate, agreement given condition) for each vocabulary size."""
    out = []
    for v in sizes:
        s = settings.with_policy(vocab_size=int(v), eos=-1)
        reports = [run_trial(d, lr) for d in draw_trials(s, estimator)]
        summ = summarize(estimator, lr, reports)
        out.append((int(v), summ.condition_rate, summ.agreement_given_condition))
    return out


@dataclass
class GapRow:
    step: int
    pos_ll: float
    neg_ll: float

    @property
    def gap(self) -> float:
        return self.pos_ll - self.neg_ll

    def values(self) -> tuple:
        return (self.step, self.pos_ll, self.neg_ll, self.gap)


def confidence_gap_experiment(cfg: RunConfig, result=None) -> list[GapRow]:
    """Mean log-likelihood of positive vs negative rollouts at every step.

    Steps without rollouts of one sign report NaN for that side, which the CSV
    writer renders as an empty field.
    """
    result = train(cfg) if result is None else result
    return [GapRow(row.step, ex.pos_ll, ex.neg_ll) for row, ex in zip(result.rows, result.extras)]


def gap_fraction(rows: Sequence[GapRow], last: Optional[int] = None) -> float:
    """Fraction of (the last ``last``) steps with a strictly positive gap."""
    sel = rows[-last:] if last else rows
    return float(np.mean([r.gap > 0 for r in sel])) if sel else float("nan")
