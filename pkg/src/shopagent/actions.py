"""Distributions over a page's dynamic action set, and decoding strategies.

An action's score is the mean token log-probability of its surface (EOS
terminator included) under the LM head; a softmax over the scores of the
presented actions gives the policy.  The open search-query slot is first
filled by sampling a query from the LM head.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autograd import Tensor, no_grad
from .environment import MAX_QUERY_TOKENS, ActionKind, ActionSpec
from .errors import ContractViolation
from .model import (
    ContextBatch,
    ContextEncoding,
    PolicyModel,
    decode_logits,
    encode_batch,
    generation_bias,
    pack_rows,
    value_from_summary,
)
from .tokenizer import EOS_ID

_MASKED = -1e9
DEFAULT_EPSILON = 0.2
DEFAULT_TOP_P = 0.8


@dataclass(frozen=True)
class ScoredActionSet:
    actions: tuple[ActionSpec, ...]
    mean_logprobs: np.ndarray
    probs: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def set_logprobs(self) -> np.ndarray:
        x = self.mean_logprobs
        m = x.max()
        return x - m - np.log(np.exp(x - m).sum())

    def policy_logprob(self, index: int) -> float:
        return float(self.set_logprobs()[index])

    def entropy(self) -> float:
        lp = self.set_logprobs()
        return float(-(np.exp(lp) * lp).sum())


def softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    e = np.exp(scores - scores.max())
    return e / e.sum()


def _is_open_query(action: ActionSpec) -> bool:
    return action.kind is ActionKind.SEARCH_QUERY and not action.surface


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(probs) - 1)


def sample_queries(model: PolicyModel, P: Mapping[str, Tensor], summary_rows: Tensor,
                   goal_rows: np.ndarray, rngs: Sequence[np.random.Generator],
                   max_tokens: int = MAX_QUERY_TOKENS) -> list[list[int]]:
    """Autoregressive temperature-1 sampling, one query per row."""
    n = len(rngs)
    prefixes: list[list[int]] = [[] for _ in range(n)]
    live = list(range(n))
    bias = generation_bias(max_tokens + 1, model.n_vocab)
    for k in range(max_tokens):
        if not live:
            break
        tokens, valid = pack_rows([prefixes[i] + [EOS_ID] for i in live], append_eos=False)
        logits = decode_logits(P, summary_rows.take_rows(np.array(live)), goal_rows[live],
                               tokens[:, :k + 1], valid[:, :k + 1])
        step = logits.data[:, k, :] + bias[k]
        still = []
        for row, i in enumerate(live):
            tok = _categorical(softmax(step[row]), rngs[i])
            if tok == EOS_ID:
                continue
            prefixes[i].append(tok)
            still.append(i)
        live = still
    return prefixes


def score_rows(P: Mapping[str, Tensor], summary: Tensor, goal_mask: np.ndarray,
               ctx_index: np.ndarray, rows: Sequence[Sequence[int]]) -> Tensor:
    """Mean token log-probability (EOS included) of each row under its context."""
    if any(len(r) == 0 for r in rows):
        raise ContractViolation("action with an empty surface cannot be scored")
    tokens, valid = pack_rows(rows)
    logits = decode_logits(P, summary.take_rows(ctx_index), goal_mask[ctx_index], tokens, valid)
    tok_lp = logits.log_softmax(-1).take_last(tokens)
    return (tok_lp * valid).sum(axis=1) * (1.0 / valid.sum(axis=1))


def score_contexts(model: PolicyModel, contexts: Sequence[ContextEncoding],
                   action_sets: Sequence[Sequence[ActionSpec]],
                   rngs: Sequence[np.random.Generator | None] | None = None,
                   ) -> tuple[list[ScoredActionSet], np.ndarray]:
    """Score every action set (materialising open query slots) and value every context."""
    if any(len(a) == 0 for a in action_sets):
        raise ContractViolation("empty action set")
    rngs = rngs or [None] * len(contexts)
    vocab = model.vocab
    with no_grad():
        P = model.tensors()
        batch = ContextBatch.build(contexts, model.n_vocab)
        summary = encode_batch(P, batch)
        values = value_from_summary(P, summary).data.copy()

        need = [i for i, acts in enumerate(action_sets) if any(_is_open_query(a) for a in acts)]
        filled: dict[int, tuple[str, ...]] = {}
        if need:
            if any(rngs[i] is None for i in need):
                raise ContractViolation("an rng is required to materialise a query slot")
            sampled = sample_queries(model, P, summary.take_rows(np.array(need)),
                                     batch.goal_mask[need], [rngs[i] for i in need])
            filled = {i: vocab.decode(ids) for i, ids in zip(need, sampled)}

        resolved: list[tuple[ActionSpec, ...]] = []
        rows, ctx_index = [], []
        for i, acts in enumerate(action_sets):
            out = []
            for a in acts:
                if _is_open_query(a):
                    a = ActionSpec(ActionKind.SEARCH_QUERY, filled[i])
                out.append(a)
                rows.append(vocab.encode(a.surface))
                ctx_index.append(i)
            resolved.append(tuple(out))
        mean_lp = score_rows(P, summary, batch.goal_mask, np.array(ctx_index), rows).data

    result, start = [], 0
    for acts in resolved:
        stop = start + len(acts)
        m = mean_lp[start:stop].copy()
        result.append(ScoredActionSet(acts, m, softmax(m)))
        start = stop
    return result, values


def action_mean_logprob(model: PolicyModel, context: ContextEncoding, action: ActionSpec) -> float:
    if not action.surface:
        raise ContractViolation("action surface is empty")
    scored, _ = score_contexts(model, [context], [[action]])
    return float(scored[0].mean_logprobs[0])


def action_distribution(model: PolicyModel, context: ContextEncoding,
                        actions: Sequence[ActionSpec],
                        rng: np.random.Generator | None = None) -> ScoredActionSet:
    if not actions:
        raise ContractViolation("empty action list")
    scored, _ = score_contexts(model, [context], [actions], [rng])
    return scored[0]


# --- differentiable policy terms for training ----------------------------------------

@dataclass
class PolicyTerms:
    logprob: Tensor   # (B,) log-probability of the chosen action within its set
    entropy: Tensor   # (B,) entropy of the distribution over the set
    value: Tensor     # (B,)


def policy_terms(model: PolicyModel, P: Mapping[str, Tensor], contexts: Sequence[ContextEncoding],
                 action_sets: Sequence[Sequence[ActionSpec]], chosen: Sequence[int]) -> PolicyTerms:
    """Graph-recording recomputation of log pi(a|o,g), entropy and value.

    ``action_sets`` must already be materialised (no open query slots).
    """
    vocab = model.vocab
    batch = ContextBatch.build(contexts, model.n_vocab)
    summary = encode_batch(P, batch)
    value = value_from_summary(P, summary)

    B = len(action_sets)
    A = max(len(a) for a in action_sets)
    rows, ctx_index = [], []
    gather = np.zeros((B, A), dtype=np.int64)
    pad_bias = np.full((B, A), _MASKED)
    pad_mask = np.zeros((B, A))
    for i, acts in enumerate(action_sets):
        for j, a in enumerate(acts):
            if _is_open_query(a):
                raise ContractViolation("query slot must be materialised before training")
            gather[i, j] = len(rows)
            pad_bias[i, j] = 0.0
            pad_mask[i, j] = 1.0
            rows.append(vocab.encode(a.surface))
            ctx_index.append(i)
    mean_lp = score_rows(P, summary, batch.goal_mask, np.array(ctx_index), rows)
    set_lp = (mean_lp.take_rows(gather) + pad_bias).log_softmax(-1)
    logprob = set_lp.take_last(np.asarray(chosen, dtype=np.int64))
    entropy = -((set_lp.exp() * set_lp) * pad_mask).sum(axis=1)
    return PolicyTerms(logprob, entropy, value)


# --- decoding strategies --------------------------------------------------------------
# The *_index functions work on a bare probability vector; the select_* wrappers
# take a ScoredActionSet and return the chosen ActionSpec.

def argmax_index(probs: np.ndarray) -> int:
    """Highest probability, lowest index on ties."""
    return int(np.argmax(probs))


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    return _categorical(np.asarray(probs, dtype=np.float64), rng)


def epsilon_greedy_index(probs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ContractViolation("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return sample_index(probs, rng)
    return argmax_index(probs)


def top_p_distribution(probs: np.ndarray, p: float) -> np.ndarray:
    """Smallest most-probable prefix with mass >= p, renormalised."""
    if not 0.0 < p <= 1.0:
        raise ContractViolation("top-p must lie in (0, 1]")
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    keep = int(np.searchsorted(np.cumsum(probs[order]), p - 1e-12)) + 1
    out = np.zeros_like(probs)
    out[order[:keep]] = probs[order[:keep]]
    return out / out.sum()


def top_p_index(probs: np.ndarray, p: float, rng: np.random.Generator) -> int:
    return sample_index(top_p_distribution(probs, p), rng)


def select_argmax(dist: ScoredActionSet) -> ActionSpec:
    return dist.actions[argmax_index(dist.probs)]


def select_sample(dist: ScoredActionSet, rng: np.random.Generator) -> ActionSpec:
    return dist.actions[sample_index(dist.probs, rng)]


def select_epsilon_greedy(dist: ScoredActionSet, epsilon: float,
                          rng: np.random.Generator) -> ActionSpec:
    return dist.actions[epsilon_greedy_index(dist.probs, epsilon, rng)]


def select_top_p(dist: ScoredActionSet, p: float, rng: np.random.Generator) -> ActionSpec:
    return dist.actions[top_p_index(dist.probs, p, rng)]


STRATEGIES = ("egreedy", "topp", "sample", "argmax")


@dataclass(frozen=True)
class Decoding:
    name: str = "egreedy"
    epsilon: float = DEFAULT_EPSILON
    top_p: float = DEFAULT_TOP_P

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown decoding {self.name!r}; choose from {STRATEGIES}")

    def choose(self, probs: np.ndarray, rng: np.random.Generator) -> int:
        """Index of the selected action."""
        if self.name == "argmax":
            return argmax_index(probs)
        if self.name == "sample":
            return sample_index(probs, rng)
        if self.name == "topp":
            return top_p_index(probs, self.top_p, rng)
        return epsilon_greedy_index(probs, self.epsilon, rng)
