"""The training loop, pass@K evaluation and the long-horizon failure probe."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .advantages import estimate
from .controllers import (ControllerConfig, EntropySchedule, baseline_modifier,
                          filter_group, out_of_range_indicator, rejected_objective_scope,
                          target_band)
from .entropy import token_entropies
from .policy import (Context, ContextBatch, PolicyParameters, Vocabulary, apply_update,
                     backprop_logits, batch_dists, encode_contexts, floored_log, init_params,
                     save_checkpoint)
from .rng import FILTER, INIT, MISLABEL, StreamFactory
from .tasks import TaskSpec, prompt_for, sample_batch
from .update import (UpdateConfig, clipped_surrogate_gradient, compose_and_apply,
                     entropy_gradient, kl_penalty_gradient, kl_value,
                     rollout_contexts, token_batch)

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "samples", "reward", "entropy", "target", "m", "accept_rate",
                  "skipped", "clip_frac", "kl", "grad_norm")
EVAL_HEADER = ("samples", "task", "K", "mean_at_k", "pass_at_k")


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


@dataclass
class PolicyConfig:
    variant: str = "tabular"
    vocab_size: int = 16
    eos: int = -1
    window: int = 2
    positions: int = 8
    dim: int = 32
    max_context: int = 16
    init_scale: float = 0.0
    warmstart_steps: int = 300
    warmstart_lr: float = 1.0
    warmstart_noise: float = 1.0
    warmstart_distractors: int = 1
    warmstart_tail: float = 0.01
    warmstart_noise_min: float = 0.0

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.vocab_size, self.eos if self.eos >= 0 else self.vocab_size - 1)


@dataclass
class ScheduleConfig:
    family: str = "constant"
    start: float = 0.8
    end: float = 0.8
    band_halfwidth: float = 0.05

    def build(self, vocab_size: int) -> EntropySchedule:
        return EntropySchedule(self.family, self.start, self.end, self.band_halfwidth,
                               math.log(vocab_size))


@dataclass
class RunSettings:
    seed: int = 0
    steps: int = 2000
    prompts_per_step: int = 32
    group_size: int = 8
    max_len: int = 2
    temperature: float = 1.0
    eval_every: int = 0
    eval_prompts: int = 64
    eval_k: int = 32
    eval_temperature: float = 0.6
    checkpoint_every: int = 0


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    estimator: str = "group-normalized"
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    update: UpdateConfig = field(default_factory=UpdateConfig)
    run: RunSettings = field(default_factory=RunSettings)
    sampler_lag: int = 0

    @property
    def total_samples(self) -> int:
        return self.run.steps * self.run.prompts_per_step * self.run.group_size


@dataclass
class MetricsRow:
    step: int
    samples_seen: int
    mean_reward: float
    batch_entropy: float
    target_mid: float
    m: int
    acceptance_rate: float
    skipped_groups: int
    clip_fraction: float
    kl: float
    grad_norm: float

    def values(self) -> tuple:
        return (self.step, self.samples_seen, self.mean_reward, self.batch_entropy,
                self.target_mid, self.m, self.acceptance_rate, self.skipped_groups,
                self.clip_fraction, self.kl, self.grad_norm)


@dataclass
class StepExtras:
    """Per-step quantities consumed by the analysis experiments."""

    pos_ll: float          # mean log-likelihood of positive-advantage rollouts (nan if none)
    neg_ll: float
    negatives: int         # rollouts with negative advantage
    accepted_negatives: int
    accepted_positives: int


@dataclass
class TrainResult:
    params: PolicyParameters
    rows: list[MetricsRow]
    extras: list[StepExtras]
    evals: list[tuple]
    checkpoints: list[Path]


def format_value(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def csv_line(values) -> str:
    return ",".join(format_value(v) for v in values) + "\n"


def initial_policy(cfg: RunConfig, streams: StreamFactory) -> PolicyParameters:
    """Random init, optionally distilled towards a synthetic base model.

    The base model stands in for a pretrained checkpoint: it knows most
    answers, holds confident misconceptions on some prompts, and keeps a thin
    tail over the rest of the vocabulary (see :func:`base_model_targets`).
    """
    pc = cfg.policy
    vocab = pc.vocab
    params = init_params(pc.variant, vocab, streams.generator(INIT), pc.init_scale,
                         pc.window, pc.positions, pc.dim, pc.max_context)
    if pc.warmstart_steps <= 0:
        return params
    cb, target = base_model_targets(cfg, params, streams)
    for _ in range(pc.warmstart_steps):
        # ascent direction of sum_c sum_i target log p over the contexts
        grad = backprop_logits(params, cb, target - batch_dists(params, cb))
        params = apply_update(params, grad, pc.warmstart_lr)
    return params


def base_model_targets(cfg: RunConfig, params: PolicyParameters,
                       streams: StreamFactory) -> tuple[ContextBatch, np.ndarray]:
    """Contexts and target distributions of the synthetic base model.

    For every prompt the answer step puts ``1 - rho`` on the right answer and
    ``rho`` on a handful of prompt-specific distractors, with ``rho`` drawn
    uniformly from [noise_min, noise].  The step after a single-token answer puts its
    mass on end-of-sequence.  A fraction ``tail`` of every target is spread
    uniformly over the vocabulary.
    """
    pc, task = cfg.policy, cfg.task
    v, eos = pc.vocab_size, pc.vocab.eos
    tail = pc.warmstart_tail
    values = range(v) if task.kind == "modular-sum" else range(2)
    count = task.operand_count if task.kind == "modular-sum" else task.bit_count
    contexts, targets = [], []
    seen = set()
    for tokens in itertools.product(values, repeat=count):
        if task.kind == "modular-sum":
            answer = sum(tokens) % v
        else:
            answer = sum(tokens) % 2
        code = 0
        for tok in tokens:
            code = code * v + tok
        u = streams.uniforms(MISLABEL, 0, code, 0, 1 + 2 * pc.warmstart_distractors)
        rho = pc.warmstart_noise_min + (pc.warmstart_noise - pc.warmstart_noise_min) * u[0]
        dist = np.zeros(v)
        dist[answer] = 1.0 - rho
        picks = u[1:1 + pc.warmstart_distractors]
        weights = u[1 + pc.warmstart_distractors:] + 1e-3
        weights = weights / weights.sum()
        for pick, w in zip(picks, weights):
            dist[(answer + 1 + int(pick * (v - 1))) % v] += rho * w
        contexts.append(Context(tokens, ()))
        targets.append((1.0 - tail) * dist + tail / v)
        for first in range(v):
            if first == eos:
                continue
            # contexts with the same window share a target, so keep one
            key = (tokens[-(pc.window - 1):] if pc.window > 1 else (), first)
            if key in seen:
                continue
            seen.add(key)
            stop = np.full(v, tail / v)
            stop[eos] += 1.0 - tail
            contexts.append(Context(tokens, (first,)))
            targets.append(stop)
    return encode_contexts(params, contexts), np.array(targets)


def train(cfg: RunConfig, out_dir: Optional[Path] = None,
          on_step: Optional[Callable[[MetricsRow], None]] = None) -> TrainResult:
    """Run the full loop.  Deterministic given ``cfg.run.seed``."""
    rs = cfg.run
    streams = StreamFactory(rs.seed)
    vocab = cfg.policy.vocab
    params = initial_policy(cfg, streams)
    reference = params.copy()
    previous = params
    hooks = baseline_modifier(cfg.controller.kind, cfg.controller)
    schedule = cfg.schedule.build(vocab.size)
    per_step = rs.prompts_per_step * rs.group_size
    horizon = cfg.total_samples
    rows: list[MetricsRow] = []
    extras: list[StepExtras] = []
    evals: list[tuple] = []
    checkpoints: list[Path] = []
    samples = 0

    for step in range(rs.steps):
        sampler = params if cfg.sampler_lag == 0 else previous
        prompts = [prompt_for(cfg.task, vocab.size, vocab.eos, streams, step, j)
                   for j in range(rs.prompts_per_step)]
        groups = sample_batch(sampler, prompts, list(range(rs.prompts_per_step)),
                              rs.group_size, rs.max_len, rs.temperature, streams, step)
        items = [(g.prompt.tokens, ro) for g in groups for ro in g.rollouts]
        cb_all = rollout_contexts(params, items)
        lens = np.array([len(ro.y) for _, ro in items])
        if sampler is params:
            learner_dists = np.concatenate([ro.step_dists for _, ro in items])
        else:
            learner_dists = batch_dists(params, cb_all)
        tok_h = token_entropies(learner_dists)
        seq_id = np.repeat(np.arange(len(items)), lens)
        seq_h = np.bincount(seq_id, weights=tok_h) / lens
        batch_entropy = float(seq_h.mean())

        progress = samples / horizon
        band = target_band(schedule, progress)
        target = schedule.target(progress)

        masks = []
        for g in groups:
            r = g.rewards
            if hooks.reweight is not None:
                values, mask = hooks.reweight(r, batch_entropy, target), np.ones(r.size, bool)
                if np.all(r == r[0]):
                    values = np.zeros(r.size)
            else:
                av = estimate(cfg.estimator, r)
                values, mask = av.values, av.mask
            for ro, a in zip(g.rollouts, values):
                ro.advantage = float(a)
            masks.append(mask)

        m = out_of_range_indicator(batch_entropy, band) if hooks.rejection else 0
        selections, skipped = [], 0
        for j, (g, mask) in enumerate(zip(groups, masks)):
            if hooks.rejection:
                u = streams.uniforms(FILTER, step, j, 0, len(g.rollouts))
                filter_group(g, m, cfg.controller.gamma, u)
            sel = rejected_objective_scope(g, mask)
            if not sel:
                skipped += 1
            selections.append(sel)

        tb = token_batch(params, groups, selections, cfg.update.length_norm)
        if hooks.token_mask is not None and len(tb.tokens):
            p = batch_dists(params, tb.cb)
            logp = floored_log(p[np.arange(len(tb.tokens)), tb.tokens])
            tb.keep = hooks.token_mask(logp, tb.seq_adv[tb.seq])
        sg = clipped_surrogate_gradient(params, tb, cfg.update, hooks.eps_high)
        pieces = [sg.grad]
        kl = kl_value(params, reference, cb_all)
        if cfg.update.kl_coef > 0:
            pieces.append(-cfg.update.kl_coef * kl_penalty_gradient(params, reference, cb_all))
        if hooks.entropy_coef > 0:
            pieces.append(hooks.entropy_coef * entropy_gradient(params, cb_all))
        try:
            new_params, total = compose_and_apply(params, cfg.update.lr, *pieces)
        except (FloatingPointError, ValueError) as exc:
            raise TrainingAborted(step, str(exc)) from exc

        rollouts = [ro for g in groups for ro in g.rollouts]
        accepted = sum(ro.accepted for ro in rollouts)
        samples += per_step
        row = MetricsRow(step, samples, float(np.mean([ro.reward for ro in rollouts])),
                         batch_entropy, float(target), int(m), accepted / per_step, skipped,
                         sg.clip_fraction, kl, total.grad_norm)
        rows.append(row)
        pos = [ro.log_likelihood for ro in rollouts if ro.advantage > 0]
        neg = [ro.log_likelihood for ro in rollouts if ro.advantage < 0]
        extras.append(StepExtras(
            float(np.mean(pos)) if pos else float("nan"),
            float(np.mean(neg)) if neg else float("nan"),
            len(neg),
            sum(1 for ro in rollouts if ro.advantage < 0 and ro.accepted),
            sum(1 for ro in rollouts if ro.advantage > 0 and ro.accepted),
        ))
        if on_step is not None:
            on_step(row)
        previous, params = params, new_params

        if rs.eval_every and (step + 1) % rs.eval_every == 0:
            mk, pk = evaluate_pass_at_k(params, cfg.task, rs.eval_prompts, rs.eval_k,
                                        rs.eval_temperature, streams, rs.max_len, step + 1)
            evals.append((samples, cfg.task.kind, rs.eval_k, mk, pk))
        if out_dir is not None and rs.checkpoint_every and (step + 1) % rs.checkpoint_every == 0:
            path = Path(out_dir) / f"ckpt_{step + 1:06d}.bin"
            save_checkpoint(params, path)
            checkpoints.append(path)

    return TrainResult(params, rows, extras, evals, checkpoints)


def evaluate_pass_at_k(params: PolicyParameters, task: TaskSpec, n_prompts: int, K: int,
                       temperature: float, streams: StreamFactory, max_len: int = 2,
                       tag: int = 0) -> tuple[float, float]:
    """(mean@K, pass@K) over ``n_prompts`` fresh prompts with ``K`` samples each."""
    correct = eval_correctness(params, task, n_prompts, K, temperature, streams, max_len, tag)
    return float(correct.mean()), float(correct.any(axis=1).mean())


def eval_correctness(params: PolicyParameters, task: TaskSpec, n_prompts: int, K: int,
                     temperature: float, streams: StreamFactory, max_len: int = 2,
                     tag: int = 0) -> np.ndarray:
    """Boolean (n_prompts, K) matrix of per-sample correctness."""
    if K < 1:
        raise ValueError("K must be >= 1")
    vocab = params.vocab
    # offset keeps evaluation prompt/rollout streams apart from training ones
    base = 1 << 40
    prompts = [prompt_for(task, vocab.size, vocab.eos, streams, base + tag, j)
               for j in range(n_prompts)]
    groups = sample_batch(params, prompts, list(range(n_prompts)), K, max_len, temperature,
                          streams, base + tag)
    return np.array([[ro.reward > 0.5 for ro in g.rollouts] for g in groups])


def pass_at_k_curve(correct: np.ndarray, ks) -> list[float]:
    """pass@k using the first k samples of each prompt."""
    return [float(correct[:, :k].any(axis=1).mean()) for k in ks]


@dataclass
class FailureRow:
    step: int
    samples: int
    reward: float
    entropy: float
    m: int
    negatives: int
    accepted_negatives: int
    d_entropy: float


def failure_mode_run(cfg: RunConfig) -> list[FailureRow]:
    """Train and expose how many negative rollouts entropy-raising steps can use."""
    result = train(cfg)
    out = []
    prev_h = None
    for row, ex in zip(result.rows, result.extras):
        dh = float("nan") if prev_h is None else row.batch_entropy - prev_h
        prev_h = row.batch_entropy
        out.append(FailureRow(row.step, row.samples_seen, row.mean_reward, row.batch_entropy,
                              row.m, ex.negatives, ex.accepted_negatives, dh))
    return out
