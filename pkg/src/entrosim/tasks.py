"""Synthetic verifiable tasks and grouped rollout generation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .policy import (ContextBatch, PolicyParameters, PolicyError, batch_logits,
                     floored_log, softmax)
from .rng import PROMPT, ROLLOUT, StreamFactory

TASK_KINDS = ("modular-sum", "parity")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "modular-sum"
    operand_count: int = 2
    bit_count: int = 3
    answer_length: int = 1

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.kind == "modular-sum" and self.operand_count < 2:
            raise ValueError("modular-sum needs operand_count >= 2")
        if self.kind == "parity" and self.bit_count < 1:
            raise ValueError("parity needs bit_count >= 1")
        if self.answer_length != 1:
            raise ValueError("both task kinds have single-token answers (answer_length = 1)")


@dataclass(frozen=True)
class Prompt:
    tokens: tuple[int, ...]
    ground_truth: tuple[int, ...]


@dataclass
class Rollout:
    prompt_index: int
    y: tuple[int, ...]
    step_dists: np.ndarray
    log_likelihood: float
    reward: float
    advantage: float = 0.0
    accepted: bool = True

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Group:
    prompt: Prompt
    rollouts: list[Rollout] = field(default_factory=list)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts])


def generate_prompt(task: TaskSpec, vocab_size: int, eos: int,
                    rng: np.random.Generator) -> Prompt:
    if task.kind == "modular-sum":
        operands = rng.integers(0, vocab_size, size=task.operand_count)
        answer = int(operands.sum() % vocab_size)
        return Prompt(tuple(int(a) for a in operands), (answer, eos))
    bits = rng.integers(0, 2, size=task.bit_count)
    return Prompt(tuple(int(b) for b in bits), (int(bits.sum() % 2), eos))


def prompt_for(task: TaskSpec, vocab_size: int, eos: int, streams: StreamFactory,
               step: int, index: int) -> Prompt:
    return generate_prompt(task, vocab_size, eos, streams.generator(PROMPT, step, index))


def verify(prompt: Prompt, completion: Sequence[int]) -> float:
    """1.0 iff the completion spells the answer and then ends.

    The answer occupies the leading positions; the completion must stop right
    after it, either by emitting end-of-sequence or by running out of tokens.
    Matching is positional, so an answer token that happens to equal the
    end-of-sequence id is still checked like any other token.
    """
    answer = prompt.ground_truth[:-1]
    eos = prompt.ground_truth[-1]
    n = len(answer)
    completion = tuple(completion)
    if len(completion) < n or completion[:n] != answer:
        return 0.0
    if len(completion) == n or completion[n] == eos:
        return 1.0
    return 0.0


def sample_batch(sampler: PolicyParameters, prompts: Sequence[Prompt],
                 prompt_indices: Sequence[int], group_size: int, max_len: int,
                 temperature: float, streams: StreamFactory, step: int = 0) -> list[Group]:
    """Sample ``group_size`` completions for every prompt in one vectorised sweep.

    Rollout ``(prompt_index, i)`` consumes its own counter-based stream, so the
    result does not depend on how prompts are batched together.
    """
    if group_size < 1 or max_len < 1:
        raise ValueError("group_size and max_len must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    vocab = sampler.vocab
    k = sampler.window
    n = len(prompts) * group_size
    owner = np.repeat(np.arange(len(prompts)), group_size)
    for prompt in prompts:
        if len(prompt.tokens) + max_len - 1 > sampler.max_context:
            raise PolicyError("prompt plus completion exceeds the policy's max_context")
        for tok in prompt.tokens:
            if not 0 <= tok < vocab.size:
                raise PolicyError(f"prompt token {tok} outside vocabulary")

    u = np.empty((n, max_len))
    for row in range(n):
        p_idx = prompt_indices[owner[row]]
        u[row] = streams.uniforms(ROLLOUT, step, p_idx, row % group_size, max_len)

    window = np.full((n, k), -1, dtype=np.int64)
    for row in range(n):
        tail = prompts[owner[row]].tokens[-k:]
        if tail:
            window[row, k - len(tail):] = tail
    tokens = np.full((n, max_len), -1, dtype=np.int64)
    dists = np.zeros((n, max_len, vocab.size))
    lengths = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for t in range(max_len):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        cb = ContextBatch(window[idx], np.full(idx.size, t, dtype=np.int64))
        z = batch_logits(sampler, cb)
        dists[idx, t] = softmax(z)
        q = dists[idx, t] if temperature == 1.0 else softmax(z / temperature)
        cdf = np.cumsum(q, axis=1)
        draw = u[idx, t] * cdf[:, -1]
        tok = np.minimum((cdf <= draw[:, None]).sum(axis=1), vocab.size - 1)
        tokens[idx, t] = tok
        lengths[idx] = t + 1
        window[idx] = np.concatenate([window[idx, 1:], tok[:, None]], axis=1)
        active[idx[tok == vocab.eos]] = False

    groups = [Group(prompt) for prompt in prompts]
    for row in range(n):
        g = groups[owner[row]]
        length = lengths[row]
        y = tuple(int(v) for v in tokens[row, :length])
        sd = dists[row, :length].copy()
        ll = float(floored_log(sd[np.arange(length), tokens[row, :length]]).sum())
        g.rollouts.append(Rollout(prompt_indices[owner[row]], y, sd, ll, verify(g.prompt, y)))
    return groups


def rollout_group(sampler: PolicyParameters, prompt: Prompt, G: int, max_len: int,
                  temperature: float, streams: StreamFactory, step: int = 0,
                  prompt_index: int = 0) -> Group:
    """``G`` sampled completions of ``prompt`` with teacher-forced distributions."""
    return sample_batch(sampler, [prompt], [prompt_index], G, max_len, temperature,
                        streams, step)[0]
