"""Small shared helpers for the test modules."""

from __future__ import annotations

import numpy as np

from entrosim.policy import Vocabulary, init_params
from entrosim.rng import StreamFactory
from entrosim.tasks import Prompt, sample_batch
from entrosim.tasks import TaskSpec
from entrosim.trainer import PolicyConfig, RunConfig, RunSettings
from entrosim.update import (UpdateConfig, clipped_surrogate_gradient, surrogate_objective,
                             token_batch)


def tiny_params(variant="tabular", size=5, seed=0, scale=1.0, window=1, positions=3, dim=4,
                max_context=8):
    rng = np.random.default_rng(seed)
    return init_params(variant, Vocabulary(size, size - 1), rng, scale, window, positions, dim,
                       max_context)


def central_difference(fn, theta, h=1e-6, coords=None):
    """Numerical gradient of ``fn(theta)`` by central differences."""
    coords = range(theta.size) if coords is None else coords
    out = np.zeros_like(theta)
    for k in coords:
        up = theta.copy()
        dn = theta.copy()
        up[k] += h
        dn[k] -= h
        out[k] = (fn(up) - fn(dn)) / (2 * h)
    return out


def rel_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def small_run(steps=12, seed=0, **changes) -> RunConfig:
    """A fast training config; keyword arguments replace whole sub-configs."""
    cfg = RunConfig(
        task=TaskSpec(),
        policy=PolicyConfig(vocab_size=8, warmstart_steps=40),
        run=RunSettings(seed=seed, steps=steps, prompts_per_step=6, group_size=4),
        update=UpdateConfig(lr=0.1),
    )
    for key, value in changes.items():
        setattr(cfg, key, value)
    return cfg


def tiny_instance(variant="tabular", drift=0.3, seed=0, length_norm=False, v=3, G=2):
    sampler = tiny_params(variant, size=v, seed=seed, window=1, positions=2, dim=3)
    rng = np.random.default_rng(seed + 100)
    learner = sampler.with_theta(sampler.theta + drift * rng.standard_normal(sampler.n_params))
    prompts = [Prompt((0,), (1, v - 1)), Prompt((1,), (2 % v, v - 1))]
    groups = sample_batch(sampler, prompts, [0, 1], G, 2, 1.0, StreamFactory(seed), 0)
    for g in groups:
        for ro in g.rollouts:
            ro.advantage = float(rng.standard_normal())
    selections = [list(range(G))] * len(groups)
    tb = token_batch(learner, groups, selections, length_norm)
    return sampler, learner, groups, tb


def fd_check(learner, tb, cfg, eps_high=None):
    fn = lambda th: surrogate_objective(learner.with_theta(th), tb, cfg, eps_high)
    num = central_difference(fn, learner.theta, h=1e-6)
    ana = clipped_surrogate_gradient(learner, tb, cfg, eps_high).grad
    return rel_error(num, ana)
