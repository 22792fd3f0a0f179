import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from entrosim.policy import (CheckpointError, Context, PolicyError, PolicyParameters,
                             Vocabulary, apply_update, encode_contexts, forward_dist,
                             init_params, load_checkpoint, logprob_gradient, save_checkpoint,
                             sequence_log_likelihood, table_rows, teacher_forced_contexts)

from _util import central_difference, rel_error, tiny_params


def naive_mlp_dist(params, prompt, prefix):
    """Straight-line embed -> tanh -> linear -> softmax, one context at a time."""
    tokens = list(prompt) + list(prefix)
    k = params.window
    window = tokens[-k:]
    h0 = [0.0] * params.dim
    for tok in window:
        for d in range(params.dim):
            h0[d] += params.block("embed")[tok, d] / k
    pos = min(len(prefix), params.positions - 1)
    for d in range(params.dim):
        h0[d] += params.block("pos_embed")[pos, d]
    w, b = params.block("hidden_w"), params.block("hidden_b")
    h1 = [math.tanh(sum(w[i, j] * h0[j] for j in range(params.dim)) + b[i])
          for i in range(params.dim)]
    ow, ob = params.block("out_w"), params.block("out_b")
    z = [sum(ow[v, d] * h1[d] for d in range(params.dim)) + ob[v] for v in range(params.vocab.size)]
    top = max(z)
    e = [math.exp(x - top) for x in z]
    return np.array(e) / sum(e)


def test_zero_logits_give_uniform():
    p = init_params("tabular", Vocabulary(16, 15))
    assert np.allclose(forward_dist(p, Context((1, 2), (3,))), 1 / 16, atol=0, rtol=1e-15)
    m = init_params("mlp", Vocabulary(16, 15))
    assert np.allclose(forward_dist(m, Context((1, 2))), 1 / 16)


def test_saturated_logit_is_one_hot():
    p = init_params("tabular", Vocabulary(4, 3), window=1, positions=1)
    ctx = Context((2,))
    row = table_rows(p, encode_contexts(p, [ctx]))[0]
    p.block("logits")[row, 0] = 800.0
    d = forward_dist(p, ctx)
    assert d[0] == 1.0 and np.all(d[1:] < 1e-300)


def test_mlp_forward_matches_naive_oracle():
    p = tiny_params("mlp", size=6, seed=3, window=2, dim=5)
    for prompt, prefix in [((1, 2), ()), ((4,), (0, 3)), ((5, 5, 1), (2,))]:
        fast = forward_dist(p, Context(prompt, prefix))
        assert np.allclose(fast, naive_mlp_dist(p, prompt, prefix), atol=1e-12, rtol=0)
        assert np.array_equal(fast, forward_dist(p, Context(prompt, prefix)))


def test_sequence_log_likelihood_cases():
    p = init_params("tabular", Vocabulary(16, 15))
    assert math.isclose(sequence_log_likelihood(p, (1, 2), (3, 4, 5)), 3 * math.log(1 / 16))
    m = tiny_params("mlp", size=6, seed=1, window=2, dim=4)
    prompt, y = (1, 2), (3, 0, 5)
    want = sum(math.log(naive_mlp_dist(m, prompt, y[:t])[y[t]]) for t in range(len(y)))
    assert math.isclose(sequence_log_likelihood(m, prompt, y), want, rel_tol=1e-12)
    with pytest.raises(PolicyError):
        sequence_log_likelihood(p, (1,), (16,))
    with pytest.raises(PolicyError):
        sequence_log_likelihood(p, (1,), ())


def test_one_hot_policy_has_zero_loglik_and_vanishing_gradient():
    p = init_params("tabular", Vocabulary(4, 3), window=1, positions=3)
    prompt, y = (1,), (2, 3)
    rows = table_rows(p, teacher_forced_contexts(p, prompt, y))
    for r, tok in zip(rows, y):
        p.block("logits")[r, tok] = 60.0
    assert abs(sequence_log_likelihood(p, prompt, y)) < 1e-20
    assert np.linalg.norm(logprob_gradient(p, prompt, y)) <= 1e-6


def test_tabular_gradient_closed_form():
    p = tiny_params("tabular", size=5, seed=2, window=1, positions=2)
    prompt, y = (3,), (3, 3, 1)    # positions clamp, so rows repeat
    cb = teacher_forced_contexts(p, prompt, y)
    rows = table_rows(p, cb)
    want = np.zeros(p.block("logits").shape)
    for t, (r, tok) in enumerate(zip(rows, y)):
        probs = forward_dist(p, Context(prompt, y[:t]))
        want[r] += np.eye(5)[tok] - probs
    assert np.allclose(logprob_gradient(p, prompt, y), want.ravel(), atol=1e-14)


@given(st.integers(0, 10**6), st.sampled_from(["tabular", "mlp"]),
       st.lists(st.integers(0, 4), min_size=1, max_size=4),
       st.lists(st.integers(0, 4), min_size=1, max_size=3))
def test_logprob_gradient_matches_finite_differences(seed, variant, y, prompt):
    p = tiny_params(variant, size=5, seed=seed, window=2, dim=3)
    grad = logprob_gradient(p, prompt, y)
    fn = lambda th: sequence_log_likelihood(p.with_theta(th), prompt, y)
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(p.n_params)
    h = 1e-5
    fd = (fn(p.theta + h * direction) - fn(p.theta - h * direction)) / (2 * h)
    an = float(grad @ direction)
    assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6)


def test_logprob_gradient_full_fd_both_variants():
    for variant in ("tabular", "mlp"):
        p = tiny_params(variant, size=4, seed=5, window=2, dim=3, positions=2)
        prompt, y = (1, 2), (0, 3)
        fn = lambda th: sequence_log_likelihood(p.with_theta(th), prompt, y)
        assert rel_error(central_difference(fn, p.theta), logprob_gradient(p, prompt, y)) < 1e-6


@given(st.integers(0, 10**6), st.sampled_from(["tabular", "mlp"]),
       st.lists(st.integers(0, 5), min_size=0, max_size=5), st.floats(0.0, 6.0))
def test_softmax_normalised(seed, variant, prefix, scale):
    p = tiny_params(variant, size=6, seed=seed, scale=scale, window=2, dim=4)
    d = forward_dist(p, Context((1, 2), tuple(prefix)))
    assert np.all(d >= 0) and abs(d.sum() - 1.0) < 1e-9


def test_tabular_hash_is_total_and_bounded():
    p = init_params("tabular", Vocabulary(5, 4), window=2, positions=3)
    n_rows = p.block("logits").shape[0]
    ctxs = [Context((a,), pre) for a in range(5) for b in range(5) for c in range(5)
            for pre in [(), (b,), (b, c), (b, c, a)]]
    rows = table_rows(p, encode_contexts(p, ctxs))
    assert rows.min() >= 0 and rows.max() < n_rows


def test_context_validation():
    p = init_params("tabular", Vocabulary(5, 4), max_context=3)
    with pytest.raises(PolicyError):
        forward_dist(p, Context((5,)))
    with pytest.raises(PolicyError):
        forward_dist(p, Context((1, 2), (3, 4)))
    with pytest.raises(PolicyError):
        Vocabulary(1, 0)
    with pytest.raises(PolicyError):
        Vocabulary(4, 4)


def test_non_finite_logits_name_the_block():
    p = tiny_params("mlp", size=4, seed=0)
    p.block("out_b")[1] = np.inf
    with pytest.raises(PolicyError, match="out_b"):
        forward_dist(p, Context((1,)))


def test_apply_update_rules():
    p = tiny_params("tabular", seed=1)
    before = p.theta.copy()
    g1 = np.random.default_rng(0).standard_normal(p.n_params)
    g2 = np.random.default_rng(1).standard_normal(p.n_params)
    assert np.array_equal(apply_update(p, g1, 0.0).theta, before)
    assert np.array_equal(apply_update(p, np.zeros_like(g1), 0.3).theta, before)
    two = apply_update(apply_update(p, g1, 0.3), g2, 0.3)
    assert np.allclose(two.theta, apply_update(p, g1 + g2, 0.3).theta, atol=1e-14)
    assert np.array_equal(p.theta, before)
    with pytest.raises(PolicyError):
        apply_update(p, np.full_like(g1, np.inf), 1.0)
    with pytest.raises(PolicyError):
        apply_update(p, g1[:-1], 1.0)


@pytest.mark.parametrize("variant", ["tabular", "mlp"])
def test_checkpoint_round_trip(tmp_path, variant):
    p = tiny_params(variant, size=6, seed=4, window=2, dim=5)
    path = tmp_path / "c.bin"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert isinstance(q, PolicyParameters) and q.variant == variant
    for ctx in [Context((1, 2)), Context((3,), (4, 0))]:
        assert np.array_equal(forward_dist(p, ctx), forward_dist(q, ctx))


def test_checkpoint_errors(tmp_path):
    p = tiny_params("tabular", size=6, seed=4)
    path = tmp_path / "c.bin"
    save_checkpoint(p, path)
    data = path.read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-3])
    with pytest.raises(CheckpointError, match="byte offset"):
        load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "h.bin").write_bytes(b"not a checkpoint\n" + data)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "h.bin")
    (tmp_path / "n.bin").write_bytes(b"entrosim-ckpt v1 variant=tabular")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "n.bin")
