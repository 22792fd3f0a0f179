import math
from collections import Counter

import numpy as np
import pytest

from entrosim.policy import (Context, Vocabulary, apply_update, batch_dists, encode_contexts,
                             init_params, logprob_gradient, sequence_log_likelihood,
                             table_rows)
from entrosim.update import (UpdateConfig, clipped_surrogate_gradient, compose_and_apply,
                             entropy_gradient, entropy_value, gspo_ratio, importance_ratios,
                             kl_penalty_gradient, kl_value, rollout_contexts, token_batch)

from _util import central_difference, fd_check, rel_error, tiny_instance


@pytest.mark.parametrize("variant", ["tabular", "mlp"])
@pytest.mark.parametrize("objective", ["plain-pg", "grpo-clipped", "gspo-clipped"])
@pytest.mark.parametrize("length_norm", [False, True])
def test_surrogate_gradients_match_finite_differences(variant, objective, length_norm):
    for seed in range(3):
        _, learner, _, tb = tiny_instance(variant, seed=seed, length_norm=length_norm)
        cfg = UpdateConfig(objective=objective, eps_low=0.2, eps_high=0.2)
        assert fd_check(learner, tb, cfg) <= 1e-4
        assert fd_check(learner, tb, cfg, eps_high=0.28) <= 1e-4


def test_clipping_is_exercised_by_the_fd_instances():
    _, learner, _, tb = tiny_instance("tabular", drift=0.6, seed=1)
    sg = clipped_surrogate_gradient(learner, tb, UpdateConfig())
    assert 0.0 < sg.clip_fraction < 1.0


def test_token_mask_gradient_matches_fd():
    _, learner, _, tb = tiny_instance("tabular", seed=2)
    tb.keep = np.array([k % 3 != 0 for k in range(len(tb.tokens))])
    for objective in ("grpo-clipped", "gspo-clipped"):
        assert fd_check(learner, tb, UpdateConfig(objective=objective)) <= 1e-4


@pytest.mark.parametrize("variant", ["tabular", "mlp"])
def test_kl_and_entropy_gradients_match_fd(variant):
    sampler, learner, groups, _ = tiny_instance(variant, seed=4)
    cb = rollout_contexts(learner, [(g.prompt.tokens, ro) for g in groups for ro in g.rollouts])
    kl = lambda th: kl_value(learner.with_theta(th), sampler, cb)
    assert rel_error(central_difference(kl, learner.theta),
                     kl_penalty_gradient(learner, sampler, cb)) <= 1e-4
    ent = lambda th: entropy_value(learner.with_theta(th), cb)
    assert rel_error(central_difference(ent, learner.theta), entropy_gradient(learner, cb)) <= 1e-4


def test_kl_bernoulli_closed_form():
    p = init_params("tabular", Vocabulary(2, 1), window=1, positions=1)
    ref = p.copy()
    cb = encode_contexts(p, [Context((0,))])
    row = table_rows(p, cb)[0]
    p.block("logits")[row] = [0.7, -0.4]
    ref.block("logits")[row] = [0.1, 0.2]
    pp = 1 / (1 + math.exp(-(0.7 + 0.4)))
    qq = 1 / (1 + math.exp(-(0.1 - 0.2)))
    dkl_dp = math.log(pp / qq) - math.log((1 - pp) / (1 - qq))
    want = np.array([dkl_dp * pp * (1 - pp), -dkl_dp * pp * (1 - pp)])
    got = kl_penalty_gradient(p, ref, cb).reshape(-1, 2)[row]
    assert np.allclose(got, want, atol=1e-14)
    assert np.all(kl_penalty_gradient(ref, ref, cb) == 0.0)


def test_ratios():
    sampler, learner, groups, _ = tiny_instance("mlp", seed=5)
    ro = groups[0].rollouts[0]
    prompt = groups[0].prompt.tokens
    assert np.allclose(importance_ratios(sampler, sampler, prompt, ro), 1.0, rtol=0, atol=1e-15)
    assert gspo_ratio(sampler, sampler, prompt, ro) == 1.0
    r = importance_ratios(learner, sampler, prompt, ro)
    cb = encode_contexts(learner, [Context(prompt, ro.y[:t]) for t in range(len(ro.y))])
    idx = (np.arange(len(ro.y)), list(ro.y))
    lp = np.log(batch_dists(learner, cb)[idx])
    ls = np.log(batch_dists(sampler, cb)[idx])
    assert np.allclose(r, np.exp(lp - ls), rtol=1e-12, atol=0)
    assert math.isclose(gspo_ratio(learner, sampler, prompt, ro),
                        float(np.prod(r)) ** (1 / len(ro.y)), rel_tol=1e-12)


def test_ratio_direct_and_floor_counter():
    p = init_params("tabular", Vocabulary(2, 1), window=1, positions=1)
    q = p.copy()
    cb = encode_contexts(p, [Context((0,))])
    row = table_rows(p, cb)[0]
    p.block("logits")[row] = [math.log(0.2), math.log(0.8)]
    q.block("logits")[row] = [math.log(0.1), math.log(0.9)]
    _, _, groups, _ = tiny_instance(v=2)
    ro = groups[0].rollouts[0]
    ro.y = (0,)
    assert math.isclose(importance_ratios(p, q, (0,), ro)[0], 2.0, rel_tol=1e-12)
    q.block("logits")[row] = [-100.0, 100.0]
    counter = Counter()
    importance_ratios(p, q, (0,), ro, counter)
    assert counter["sampler_floor"] == 1


def test_on_policy_grpo_equals_plain_pg_and_no_clipping():
    sampler, _, groups, _ = tiny_instance("tabular", seed=6)
    tb = token_batch(sampler, groups, [[0, 1], [0, 1]])
    grpo = clipped_surrogate_gradient(sampler, tb, UpdateConfig(objective="grpo-clipped"))
    plain = clipped_surrogate_gradient(sampler, tb, UpdateConfig(objective="plain-pg"))
    assert grpo.clip_fraction == 0.0 and math.isclose(grpo.mean_ratio, 1.0)
    assert np.allclose(grpo.grad, plain.grad, atol=1e-14)
    want = np.zeros_like(sampler.theta)
    for g in groups:
        for ro in g.rollouts:
            want += ro.advantage * logprob_gradient(sampler, g.prompt.tokens, ro.y) / 2
    assert np.allclose(plain.grad, want, atol=1e-14)


def test_clipped_branch_has_zero_gradient():
    sampler, _, groups, _ = tiny_instance("tabular", v=3, G=1)
    g = groups[0]
    ro = g.rollouts[0]
    ro.advantage = 1.0
    ro.y = ro.y[:1]
    ro.step_dists = ro.step_dists[:1]
    learner = sampler.copy()
    cb = encode_contexts(learner, [Context(g.prompt.tokens)])
    learner.block("logits")[table_rows(learner, cb)[0], ro.y[0]] += 3.0   # ratio far above 1.2
    tb = token_batch(learner, [g], [[0]])
    sg = clipped_surrogate_gradient(learner, tb, UpdateConfig())
    assert sg.clip_fraction == 1.0 and np.all(sg.grad == 0.0)


def test_empty_selection_and_compose():
    sampler, _, groups, _ = tiny_instance()
    tb = token_batch(sampler, groups, [[], []])
    assert np.all(clipped_surrogate_gradient(sampler, tb, UpdateConfig()).grad == 0)
    g = np.random.default_rng(0).standard_normal(sampler.n_params)
    new, _ = compose_and_apply(sampler, 0.0, g)
    assert np.array_equal(new.theta, sampler.theta)
    a, _ = compose_and_apply(sampler, 0.1, g, np.zeros_like(g))
    b, _ = compose_and_apply(sampler, 0.1, g)
    assert np.array_equal(a.theta, b.theta)
    with pytest.raises(FloatingPointError):
        compose_and_apply(sampler, 0.1, np.full_like(g, np.nan))


def test_positive_advantages_ascend():
    sampler, _, groups, _ = tiny_instance("mlp", seed=3)
    for g in groups:
        for ro in g.rollouts:
            ro.advantage = abs(ro.advantage)
    tb = token_batch(sampler, groups, [[0, 1], [0, 1]])
    grad = clipped_surrogate_gradient(sampler, tb, UpdateConfig()).grad

    def weighted_loglik(params):
        total = 0.0
        for g in groups:
            for ro in g.rollouts:
                total += ro.advantage * sequence_log_likelihood(params, g.prompt.tokens, ro.y)
        return total

    assert weighted_loglik(apply_update(sampler, grad, 1e-3)) > weighted_loglik(sampler)


def test_two_steps_differ_from_one_double_step():
    sampler, _, groups, _ = tiny_instance("tabular", seed=2)
    cfg = UpdateConfig()
    tb = token_batch(sampler, groups, [[0, 1], [0, 1]])
    g0 = clipped_surrogate_gradient(sampler, tb, cfg).grad
    once = apply_update(sampler, g0, 2.0)
    first = apply_update(sampler, g0, 1.0)
    g1 = clipped_surrogate_gradient(first, tb, cfg).grad
    twice = apply_update(first, g1, 1.0)
    assert not np.allclose(once.theta, twice.theta)


def test_update_config_validation():
    for kwargs in ({"objective": "adam"}, {"lr": 0.0}, {"kl_coef": -1.0}, {"eps_low": 1.5}):
        with pytest.raises(ValueError):
            UpdateConfig(**kwargs)
