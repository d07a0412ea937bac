"""Prompts, responses, and the tabular autoregressive sequence model.

Responses are fixed-length tuples of ``length`` token ids drawn from a
vocabulary ``{0, .., vocab_size-1}``. The model keeps one logit vector per
(prompt, position, prefix) context, so it can represent *any* conditional
distribution over the ``vocab_size ** length`` response space. That full
expressiveness is what makes exact optimality and stationarity checks
meaningful: the target distribution is always inside the model family.

Everything here is exact and enumeration-friendly: log-probabilities are
accumulated in log space, per-step softmaxes use max subtraction, and the
full response support can be materialized as long as it stays under
``DEFAULT_SUPPORT_CAP``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation, SupportCapExceeded

DEFAULT_SUPPORT_CAP = 65536

Response = tuple  # length-L tuple of ints in [0, vocab_size)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ContractViolation(message)


@dataclass(frozen=True)
class Vocab:
    """Response token vocabulary: token ids are exactly 0..size-1."""

    size: int

    def __post_init__(self):
        _require(self.size >= 2, f"vocab size must be >= 2, got {self.size}")


class PromptDistribution:
    """Distribution over a finite prompt set, stored as a probability vector."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64).copy()
        _require(w.ndim == 1 and w.size >= 1, "weights must be a nonempty vector")
        _require(bool(np.all(w >= 0.0)), "prompt weights must be nonnegative")
        _require(abs(float(w.sum()) - 1.0) <= 1e-12,
                 f"prompt weights must sum to 1, got {w.sum()!r}")
        w.setflags(write=False)
        self._weights = w

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    @property
    def prompt_count(self) -> int:
        return int(self._weights.size)

    @classmethod
    def uniform(cls, prompt_count: int) -> "PromptDistribution":
        return cls(np.full(prompt_count, 1.0 / prompt_count))

    def sample(self, rng: np.random.Generator, size=None):
        """Draw prompt ids by inverse CDF (deterministic given the stream)."""
        cdf = np.cumsum(self._weights)
        cdf[-1] = 1.0
        u = rng.random(size)
        return np.searchsorted(cdf, u, side="right").astype(np.int64)


class AutoregressiveTable:
    """Tabular autoregressive conditional distribution p(response | prompt).

    Logits are stored as a float64 array of shape ``(prompt_count,
    num_nodes, vocab_size)`` where the node axis flattens all prefix
    contexts position-major: node 0 is the empty prefix, nodes 1..V are the
    length-1 prefixes in lexicographic order, and so on. ``num_nodes =
    (V**L - 1) / (V - 1)``.
    """

    def __init__(self, vocab_size: int, length: int, prompt_count: int,
                 logits: np.ndarray | None = None):
        _require(vocab_size >= 2, f"vocab size must be >= 2, got {vocab_size}")
        _require(length >= 1, f"length must be >= 1, got {length}")
        _require(prompt_count >= 1, f"prompt count must be >= 1, got {prompt_count}")
        self.vocab_size = int(vocab_size)
        self.length = int(length)
        self.prompt_count = int(prompt_count)
        # offsets[l] = index of the first node at position l
        self._offsets = np.concatenate(
            [[0], np.cumsum(vocab_size ** np.arange(length - 1))]
        ).astype(np.int64) if length > 1 else np.zeros(1, dtype=np.int64)
        self.num_nodes = int(self._offsets[-1] + vocab_size ** (length - 1))
        shape = (self.prompt_count, self.num_nodes, self.vocab_size)
        if logits is None:
            self.logits = np.zeros(shape, dtype=np.float64)
        else:
            logits = np.asarray(logits, dtype=np.float64)
            _require(logits.shape == shape,
                     f"logits shape {logits.shape} != expected {shape}")
            self.logits = logits.copy()

    @classmethod
    def uniform(cls, vocab_size, length, prompt_count):
        """All-zero logits: the uniform distribution over responses."""
        return cls(vocab_size, length, prompt_count)

    @classmethod
    def random(cls, vocab_size, length, prompt_count, rng, low=-2.0, high=2.0):
        model = cls(vocab_size, length, prompt_count)
        model.logits = rng.uniform(low, high, size=model.logits.shape)
        return model

    @property
    def support_size(self) -> int:
        return self.vocab_size ** self.length

    def node_offsets(self) -> np.ndarray:
        return self._offsets

    def freeze(self) -> "AutoregressiveTable":
        self.logits.setflags(write=False)
        return self

    def shape_key(self):
        return (self.vocab_size, self.length, self.prompt_count)

    def _check_prompt(self, prompt: int) -> int:
        prompt = int(prompt)
        _require(0 <= prompt < self.prompt_count,
                 f"prompt id {prompt} out of range [0, {self.prompt_count})")
        return prompt

    def _check_response(self, response) -> np.ndarray:
        tokens = np.asarray(response, dtype=np.int64)
        _require(tokens.shape == (self.length,),
                 f"response must have exactly {self.length} tokens, got {tokens.shape}")
        _require(bool(np.all((tokens >= 0) & (tokens < self.vocab_size))),
                 f"response tokens must lie in [0, {self.vocab_size})")
        return tokens


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log softmax over the last axis, with max subtraction."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def step_log_probs(model: AutoregressiveTable) -> np.ndarray:
    """Per-context log probabilities, shape (prompt, node, token)."""
    return log_softmax(model.logits)


def path_nodes(model: AutoregressiveTable, responses: np.ndarray) -> np.ndarray:
    """Node index visited at each position for a batch of responses.

    ``responses`` has shape (B, L); the result has shape (B, L) where entry
    [b, l] is the node holding the step-l logits for response b.
    """
    B = responses.shape[0]
    offsets = model.node_offsets()
    nodes = np.empty((B, model.length), dtype=np.int64)
    prefix = np.zeros(B, dtype=np.int64)
    for pos in range(model.length):
        nodes[:, pos] = offsets[pos] + prefix
        prefix = prefix * model.vocab_size + responses[:, pos]
    return nodes


def log_prob_batch(model: AutoregressiveTable, prompts, responses) -> np.ndarray:
    """Vectorized log p(response | prompt) for aligned arrays.

    ``prompts``: (B,) int array. ``responses``: (B, L) int array.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    responses = np.asarray(responses, dtype=np.int64)
    _require(responses.ndim == 2 and responses.shape[1] == model.length,
             f"responses must be (B, {model.length}), got {responses.shape}")
    _require(prompts.shape == (responses.shape[0],),
             "prompts and responses must be index-aligned")
    _require(bool(np.all((prompts >= 0) & (prompts < model.prompt_count))),
             "prompt id out of range")
    _require(bool(np.all((responses >= 0) & (responses < model.vocab_size))),
             "response token out of range")
    lsm = step_log_probs(model)
    nodes = path_nodes(model, responses)
    total = np.zeros(responses.shape[0], dtype=np.float64)
    for pos in range(model.length):
        total += lsm[prompts, nodes[:, pos], responses[:, pos]]
    return total


def log_prob(model: AutoregressiveTable, prompt: int, response) -> float:
    """Exact log p(response | prompt) in nats."""
    prompt = model._check_prompt(prompt)
    tokens = model._check_response(response)
    return float(log_prob_batch(model, np.array([prompt]), tokens[None, :])[0])


def sample_batch(model: AutoregressiveTable, prompts, rng: np.random.Generator) -> np.ndarray:
    """Draw one response per prompt id, token by token via inverse CDF."""
    prompts = np.asarray(prompts, dtype=np.int64)
    _require(bool(np.all((prompts >= 0) & (prompts < model.prompt_count))),
             "prompt id out of range")
    B = prompts.size
    probs = np.exp(step_log_probs(model))
    offsets = model.node_offsets()
    out = np.empty((B, model.length), dtype=np.int64)
    prefix = np.zeros(B, dtype=np.int64)
    for pos in range(model.length):
        rows = probs[prompts, offsets[pos] + prefix]
        cdf = np.cumsum(rows, axis=1)
        cdf[:, -1] = 1.0  # guard against rounding shortfall
        u = rng.random(B)
        tokens = (u[:, None] >= cdf).sum(axis=1)
        out[:, pos] = tokens
        prefix = prefix * model.vocab_size + tokens
    return out


def sample(model: AutoregressiveTable, prompt: int, rng: np.random.Generator) -> Response:
    """Draw a single response for one prompt."""
    prompt = model._check_prompt(prompt)
    return tuple(int(t) for t in sample_batch(model, np.array([prompt]), rng)[0])


def enumerate_support(vocab_size: int, length: int,
                      cap: int = DEFAULT_SUPPORT_CAP) -> list:
    """All ``vocab_size ** length`` responses in lexicographic order."""
    _require(vocab_size >= 2, f"vocab size must be >= 2, got {vocab_size}")
    _require(length >= 1, f"length must be >= 1, got {length}")
    total = vocab_size ** length
    if total > cap:
        raise SupportCapExceeded(
            f"support too large: {vocab_size}**{length} = {total} exceeds cap {cap}")
    return list(itertools.product(range(vocab_size), repeat=length))


def response_log_prob_table(model: AutoregressiveTable,
                            cap: int = DEFAULT_SUPPORT_CAP) -> np.ndarray:
    """Log probability of every response, shape (prompt_count, V**L).

    Column order matches :func:`enumerate_support`.
    """
    S = model.support_size
    if S > cap:
        raise SupportCapExceeded(
            f"support too large: {S} responses exceeds cap {cap}")
    V, L = model.vocab_size, model.length
    lsm = step_log_probs(model)
    offsets = model.node_offsets()
    total = np.zeros((model.prompt_count, S), dtype=np.float64)
    prefix = np.zeros(S, dtype=np.int64)
    idx = np.arange(S)
    for pos in range(L):
        digits = (idx // V ** (L - 1 - pos)) % V
        total += lsm[:, offsets[pos] + prefix, digits]
        prefix = prefix * V + digits
    return total


def response_prob_table(model: AutoregressiveTable,
                        cap: int = DEFAULT_SUPPORT_CAP) -> np.ndarray:
    return np.exp(response_log_prob_table(model, cap))


def snapshot(model: AutoregressiveTable) -> AutoregressiveTable:
    """Independent value-identical copy (bit-exact logits, no aliasing)."""
    return AutoregressiveTable(model.vocab_size, model.length,
                               model.prompt_count, model.logits)


def kl_divergence(p: AutoregressiveTable, r: AutoregressiveTable,
                  q: PromptDistribution, cap: int = DEFAULT_SUPPORT_CAP) -> float:
    """Exact E_{x~q} KL(p(.|x) || r(.|x)) in nats, by full enumeration."""
    _require(p.shape_key() == r.shape_key(),
             f"model shapes differ: {p.shape_key()} vs {r.shape_key()}")
    _require(q.prompt_count == p.prompt_count,
             "prompt distribution size does not match the models")
    lp = response_log_prob_table(p, cap)
    lr = response_log_prob_table(r, cap)
    per_prompt = (np.exp(lp) * (lp - lr)).sum(axis=1)
    return float(q.weights @ per_prompt)


@dataclass
class TaskSpec:
    """Ground-truth generative task: prompt distribution plus a frozen target."""

    prompt_dist: PromptDistribution
    target: AutoregressiveTable
    seed: int

    def __post_init__(self):
        _require(self.seed >= 0, "task seed must be a nonnegative integer")
        _require(self.prompt_dist.prompt_count == self.target.prompt_count,
                 "prompt distribution and target disagree on prompt count")
        self.target.freeze()

    @property
    def vocab_size(self) -> int:
        return self.target.vocab_size

    @property
    def length(self) -> int:
        return self.target.length

    @property
    def prompt_count(self) -> int:
        return self.target.prompt_count
