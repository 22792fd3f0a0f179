"""Autoregressive softmax policies over a small vocabulary.

Two parameterisations share one interface:

* ``tabular``: one logit row per context row index.  The row index combines the
  last ``window`` context tokens with the generated-prefix position, so the map
  from contexts to rows is total and bounded.
* ``mlp``: mean of window-token embeddings plus a position embedding, one tanh
  hidden layer, linear read-out.  Logits are a nonlinear function of the
  parameters, which is the regime the tabular analysis does not cover.

Parameters live in one flat float64 vector; gradients use the same layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_FLOOR = 1e-12
CKPT_MAGIC = "entrosim-ckpt"
CKPT_VERSION = "v1"


class PolicyError(ValueError):
    """Invalid context, token or parameter state."""


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


@dataclass(frozen=True)
class Vocabulary:
    size: int = 16
    eos: int = 15

    def __post_init__(self):
        if self.size < 2:
            raise PolicyError(f"vocabulary size must be >= 2, got {self.size}")
        if not 0 <= self.eos < self.size:
            raise PolicyError(f"eos id {self.eos} outside [0, {self.size})")


@dataclass(frozen=True)
class Context:
    prompt: tuple[int, ...]
    prefix: tuple[int, ...] = ()


@dataclass
class ContextBatch:
    """Encoded contexts: left-padded token windows (-1 = pad) and prefix positions."""

    window: np.ndarray
    position: np.ndarray

    def __len__(self) -> int:
        return len(self.position)


@dataclass
class PolicyParameters:
    variant: str
    vocab: Vocabulary
    theta: np.ndarray
    window: int = 2
    positions: int = 8
    dim: int = 32
    max_context: int = 16
    _blocks: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in ("tabular", "mlp"):
            raise PolicyError(f"unknown policy variant {self.variant!r}")
        if self.window < 1 or self.positions < 1:
            raise PolicyError("window and positions must be >= 1")
        self.theta = np.asarray(self.theta, dtype=np.float64)
        blocks = parameter_layout(self.variant, self.vocab.size, self.window,
                                  self.positions, self.dim)
        expected = sum(int(np.prod(s)) for s in blocks.values())
        if self.theta.shape != (expected,):
            raise PolicyError(
                f"theta has shape {self.theta.shape}, layout needs ({expected},)"
            )
        self._blocks = blocks

    @property
    def n_params(self) -> int:
        return self.theta.size

    def block(self, name: str) -> np.ndarray:
        """View of one named parameter block (shares memory with ``theta``)."""
        offset = 0
        for key, shape in self._blocks.items():
            size = int(np.prod(shape))
            if key == name:
                return self.theta[offset:offset + size].reshape(shape)
            offset += size
        raise KeyError(name)

    def block_names(self) -> list[str]:
        return list(self._blocks)

    def with_theta(self, theta: np.ndarray) -> "PolicyParameters":
        return PolicyParameters(self.variant, self.vocab, theta, self.window,
                                self.positions, self.dim, self.max_context)

    def copy(self) -> "PolicyParameters":
        return self.with_theta(self.theta.copy())


def parameter_layout(variant: str, vocab_size: int, window: int, positions: int,
                     dim: int) -> dict[str, tuple[int, ...]]:
    if variant == "tabular":
        rows = positions * (vocab_size + 1) ** window
        return {"logits": (rows, vocab_size)}
    return {
        "embed": (vocab_size, dim),
        "pos_embed": (positions, dim),
        "hidden_w": (dim, dim),
        "hidden_b": (dim,),
        "out_w": (vocab_size, dim),
        "out_b": (vocab_size,),
    }


def init_params(variant: str = "tabular", vocab: Vocabulary | None = None,
                rng: np.random.Generator | None = None, scale: float = 0.0,
                window: int = 2, positions: int = 8, dim: int = 32,
                max_context: int = 16) -> PolicyParameters:
    """Fresh parameters.

    ``scale`` is the standard deviation of the tabular logits, or of the mlp
    read-out weights (times ``1/sqrt(dim)``).  ``scale=0`` gives a uniform policy
    for both variants.
    """
    vocab = vocab or Vocabulary()
    layout = parameter_layout(variant, vocab.size, window, positions, dim)
    n = sum(int(np.prod(s)) for s in layout.values())
    theta = np.zeros(n)
    params = PolicyParameters(variant, vocab, theta, window, positions, dim, max_context)
    if rng is None:
        return params
    if variant == "tabular":
        if scale:
            params.block("logits")[...] = scale * rng.standard_normal(layout["logits"])
        return params
    params.block("embed")[...] = rng.standard_normal(layout["embed"])
    params.block("pos_embed")[...] = rng.standard_normal(layout["pos_embed"])
    params.block("hidden_w")[...] = rng.standard_normal(layout["hidden_w"]) / np.sqrt(dim)
    params.block("hidden_b")[...] = 0.1 * rng.standard_normal(dim)
    if scale:
        params.block("out_w")[...] = scale * rng.standard_normal(layout["out_w"]) / np.sqrt(dim)
    return params


# ---------------------------------------------------------------------------
# context encoding


def encode_contexts(params: PolicyParameters, contexts: Sequence[Context]) -> ContextBatch:
    k = params.window
    window = np.full((len(contexts), k), -1, dtype=np.int64)
    position = np.empty(len(contexts), dtype=np.int64)
    for n, ctx in enumerate(contexts):
        tokens = tuple(ctx.prompt) + tuple(ctx.prefix)
        _check_tokens(params, tokens)
        if len(tokens) > params.max_context:
            raise PolicyError(
                f"context length {len(tokens)} exceeds max_context {params.max_context}"
            )
        tail = tokens[-k:]
        if tail:
            window[n, k - len(tail):] = tail
        position[n] = len(ctx.prefix)
    return ContextBatch(window, position)


def teacher_forced_contexts(params: PolicyParameters, prompt: Sequence[int],
                            y: Sequence[int]) -> ContextBatch:
    """Contexts (prompt, y_<t) for t = 0..|y|-1."""
    return encode_contexts(params, [Context(tuple(prompt), tuple(y[:t])) for t in range(len(y))])


def _check_tokens(params: PolicyParameters, tokens: Sequence[int]) -> None:
    for tok in tokens:
        if not 0 <= tok < params.vocab.size:
            raise PolicyError(f"token id {tok} outside vocabulary of size {params.vocab.size}")


def table_rows(params: PolicyParameters, cb: ContextBatch) -> np.ndarray:
    base = params.vocab.size + 1
    codes = cb.window + 1
    row = np.zeros(len(cb), dtype=np.int64)
    for j in range(params.window):
        row = row * base + codes[:, j]
    pos = np.minimum(cb.position, params.positions - 1)
    return pos * base ** params.window + row


# ---------------------------------------------------------------------------
# forward / backward


def _mlp_hidden(params: PolicyParameters, cb: ContextBatch):
    embed = params.block("embed")
    valid = cb.window >= 0
    gathered = embed[np.where(valid, cb.window, 0)] * valid[..., None]
    h0 = gathered.sum(axis=1) / params.window
    h0 = h0 + params.block("pos_embed")[np.minimum(cb.position, params.positions - 1)]
    h1 = np.tanh(h0 @ params.block("hidden_w").T + params.block("hidden_b"))
    return h0, h1


def batch_logits(params: PolicyParameters, cb: ContextBatch) -> np.ndarray:
    if params.variant == "tabular":
        z = params.block("logits")[table_rows(params, cb)]
    else:
        _, h1 = _mlp_hidden(params, cb)
        z = h1 @ params.block("out_w").T + params.block("out_b")
    if not np.all(np.isfinite(z)):
        raise PolicyError(f"non-finite logits; offending parameter block: {_bad_block(params)}")
    return z


def _bad_block(params: PolicyParameters) -> str:
    for name in params.block_names():
        if not np.all(np.isfinite(params.block(name))):
            return name
    return "<activations>"


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def floored_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, PROB_FLOOR))


def batch_dists(params: PolicyParameters, cb: ContextBatch) -> np.ndarray:
    return softmax(batch_logits(params, cb))


def backprop_logits(params: PolicyParameters, cb: ContextBatch,
                    dlogits: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. theta of ``sum(dlogits * logits(cb))``."""
    grad = np.zeros_like(params.theta)
    g = params.with_theta(grad)
    if params.variant == "tabular":
        np.add.at(g.block("logits"), table_rows(params, cb), dlogits)
        return grad
    h0, h1 = _mlp_hidden(params, cb)
    g.block("out_w")[...] = dlogits.T @ h1
    g.block("out_b")[...] = dlogits.sum(axis=0)
    da = (dlogits @ params.block("out_w")) * (1.0 - h1 * h1)
    g.block("hidden_w")[...] = da.T @ h0
    g.block("hidden_b")[...] = da.sum(axis=0)
    dh0 = da @ params.block("hidden_w")
    np.add.at(g.block("pos_embed"), np.minimum(cb.position, params.positions - 1), dh0)
    share = dh0 / params.window
    for j in range(params.window):
        valid = cb.window[:, j] >= 0
        np.add.at(g.block("embed"), cb.window[valid, j], share[valid])
    return grad


# ---------------------------------------------------------------------------
# public operations


def forward_dist(params: PolicyParameters, ctx: Context) -> np.ndarray:
    """Next-token distribution at ``ctx``."""
    return batch_dists(params, encode_contexts(params, [ctx]))[0]


def sequence_log_likelihood(params: PolicyParameters, prompt: Sequence[int],
                            y: Sequence[int]) -> float:
    if len(y) == 0:
        raise PolicyError("sequence must be nonempty")
    _check_tokens(params, y)
    p = batch_dists(params, teacher_forced_contexts(params, prompt, y))
    return float(floored_log(p[np.arange(len(y)), np.asarray(y)]).sum())


def logprob_gradient(params: PolicyParameters, prompt: Sequence[int],
                     y: Sequence[int]) -> np.ndarray:
    """Exact gradient of ``sequence_log_likelihood`` w.r.t. theta."""
    if len(y) == 0:
        raise PolicyError("sequence must be nonempty")
    _check_tokens(params, y)
    cb = teacher_forced_contexts(params, prompt, y)
    p = batch_dists(params, cb)
    dz = -p
    dz[np.arange(len(y)), np.asarray(y)] += 1.0
    return backprop_logits(params, cb, dz)


def apply_update(params: PolicyParameters, grad: np.ndarray, lr: float) -> PolicyParameters:
    """Plain SGD step ``theta + lr * grad``; the input is left untouched."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.theta.shape:
        raise PolicyError(f"gradient shape {grad.shape} != parameter shape {params.theta.shape}")
    theta = params.theta + lr * grad
    if not np.all(np.isfinite(theta)):
        raise PolicyError("update produced non-finite parameters")
    return params.with_theta(theta)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_header(params: PolicyParameters) -> str:
    dim = params.dim if params.variant == "mlp" else 0
    return (f"{CKPT_MAGIC} {CKPT_VERSION} variant={params.variant} "
            f"vocab={params.vocab.size} dim={dim} eos={params.vocab.eos} "
            f"window={params.window} positions={params.positions} "
            f"max_context={params.max_context}")


def save_checkpoint(params: PolicyParameters, path: str | Path) -> None:
    payload = params.theta.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(checkpoint_header(params).encode("ascii") + b"\n")
        fh.write(payload)


def load_checkpoint(path: str | Path) -> PolicyParameters:
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise CheckpointError("checkpoint header line is missing its newline")
    try:
        fields = data[:newline].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise CheckpointError("checkpoint header is not ASCII text") from exc
    if len(fields) < 2 or fields[0] != CKPT_MAGIC or fields[1] != CKPT_VERSION:
        raise CheckpointError(f"bad checkpoint header: {data[:newline][:60]!r}")
    kv = {}
    for item in fields[2:]:
        key, sep, value = item.partition("=")
        if not sep:
            raise CheckpointError(f"bad header field {item!r}")
        kv[key] = value
    try:
        variant = kv["variant"]
        size = int(kv["vocab"])
        dim = int(kv["dim"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint header missing or bad field: {exc}") from exc
    eos = int(kv.get("eos", size - 1))
    window = int(kv.get("window", 2))
    positions = int(kv.get("positions", 8))
    max_context = int(kv.get("max_context", 16))
    if variant not in ("tabular", "mlp"):
        raise CheckpointError(f"unknown variant {variant!r} in checkpoint header")
    layout = parameter_layout(variant, size, window, positions, dim or 32)
    count = sum(int(np.prod(s)) for s in layout.values())
    start = newline + 1
    expected_end = start + 8 * count
    if len(data) != expected_end:
        raise CheckpointError(
            f"checkpoint payload truncated or oversized: expected {expected_end} bytes, "
            f"file ends at byte offset {len(data)}"
        )
    theta = np.frombuffer(data, dtype="<f8", count=count, offset=start).astype(np.float64)
    return PolicyParameters(variant, Vocabulary(size, eos), theta, window, positions,
                            dim or 32, max_context)
