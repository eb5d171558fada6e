"""Sequence policy with a language-modeling head and a value head.

Architecture (d = hidden size, N = vocabulary size):

* encoder: token + segment embeddings -> tanh projection -> one attention
  pool per context segment (goal / previous page / current page) -> tanh
  summary vector ``c``;
* decoder: for every position of an action, a tanh state from ``c``, the
  bag of already-emitted token embeddings and a position embedding;
* LM head: ``state @ lm_w + lm_b`` plus a state-dependent gate that adds
  weight to tokens present in the goal;
* value head: two-layer perceptron on ``c``.

Parameters are stored as float32 arrays (float64 for gradient checks); all
arithmetic runs in float64.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autograd import Tensor, no_grad
from .environment import Observation
from .errors import ContractViolation
from .tokenizer import EOS_ID, PAD_ID, SEP_ID, UNK_ID, Vocabulary

HIDDEN = 64
CONTEXT_LIMIT = 256
MAX_POSITIONS = 16
INIT_SCALE = 0.08
SEG_GOAL, SEG_PREV, SEG_CUR = 0, 1, 2
_MASKED = -1e9

LM_HEAD = ("lm_w", "lm_b", "copy_w", "copy_b")
VALUE_HEAD = ("value_w1", "value_b1", "value_w2", "value_b2")


def param_shapes(n_vocab: int, d: int, n_pos: int = MAX_POSITIONS) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (checkpoint) order."""
    return [
        ("embedding", (n_vocab, d)),
        ("segment", (3, d)),
        ("enc_w", (d, d)),
        ("enc_b", (d,)),
        ("att_query", (3, d)),
        ("summary_w", (3 * d, d)),
        ("summary_b", (d,)),
        ("dec_ctx_w", (d, d)),
        ("dec_tok_w", (d, d)),
        ("dec_pos", (n_pos, d)),
        ("dec_b", (d,)),
        ("lm_w", (d, n_vocab)),
        ("lm_b", (n_vocab,)),
        ("copy_w", (d,)),
        ("copy_b", (1,)),
        ("value_w1", (d, d)),
        ("value_b1", (d,)),
        ("value_w2", (d, 1)),
        ("value_b2", (1,)),
    ]


@dataclass(frozen=True)
class ContextEncoding:
    token_ids: tuple[int, ...]
    segments: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.token_ids)

    def goal_ids(self) -> tuple[int, ...]:
        return tuple(t for t, s in zip(self.token_ids, self.segments) if s == SEG_GOAL)


def encode_context(vocab: Vocabulary, goal: Sequence[str], prev_obs: Observation | None,
                   cur_obs: Observation, limit: int = CONTEXT_LIMIT) -> ContextEncoding:
    """``goal SEP prev SEP cur``; oldest tokens dropped first, goal dropped last."""
    if limit < 16:
        raise ContractViolation("context limit must be at least 16")
    goal_ids = vocab.encode(goal)
    blocks = []
    if prev_obs is not None:
        blocks.append(([SEP_ID], vocab.encode(prev_obs.text), SEG_PREV))
    blocks.append(([SEP_ID], vocab.encode(cur_obs.text), SEG_CUR))
    excess = len(goal_ids) + sum(len(s) + len(b) for s, b, _ in blocks) - limit
    trimmed = []
    for sep, body, seg in blocks:
        if excess > 0:
            cut = min(excess, len(body))
            body = body[cut:]
            excess -= cut
            if not body and excess > 0 and seg == SEG_PREV:
                sep, excess = [], excess - 1
        trimmed.append((sep, body, seg))
    if excess > 0:
        goal_ids = goal_ids[excess:]
    ids, segs = list(goal_ids), [SEG_GOAL] * len(goal_ids)
    for sep, body, seg in trimmed:
        ids += sep + body
        segs += [seg] * (len(sep) + len(body))
    return ContextEncoding(tuple(ids), tuple(segs))


@dataclass
class ContextBatch:
    """Padded arrays for a batch of contexts."""
    ids: np.ndarray
    seg: np.ndarray
    att_bias: np.ndarray
    present: np.ndarray
    goal_mask: np.ndarray

    @classmethod
    def build(cls, contexts: Sequence[ContextEncoding], n_vocab: int) -> "ContextBatch":
        B = len(contexts)
        L = max(c.length for c in contexts)
        ids = np.full((B, L), PAD_ID, dtype=np.int64)
        seg = np.full((B, L), -1, dtype=np.int64)
        goal_mask = np.zeros((B, n_vocab))
        for i, c in enumerate(contexts):
            ids[i, :c.length] = c.token_ids
            seg[i, :c.length] = c.segments
            goal = [t for t in c.goal_ids() if t > SEP_ID]
            goal_mask[i, goal] = 1.0
        member = seg[:, None, :] == np.arange(3)[None, :, None]
        att_bias = np.where(member, 0.0, _MASKED)
        present = member.any(axis=2).astype(np.float64)[..., None]
        return cls(ids, seg, att_bias, present, goal_mask)


class PolicyModel:
    """Immutable parameter snapshot plus the vocabulary it was built for."""

    def __init__(self, vocab: Vocabulary, params: Mapping[str, np.ndarray], *,
                 context_limit: int = CONTEXT_LIMIT):
        self.vocab = vocab
        self.context_limit = context_limit
        self.params = dict(params)
        self.hidden = self.params["enc_w"].shape[0]
        self.max_positions = self.params["dec_pos"].shape[0]
        expected = param_shapes(len(vocab), self.hidden, self.max_positions)
        for name, shape in expected:
            if self.params[name].shape != shape:
                raise ContractViolation(f"{name}: expected {shape}, got {self.params[name].shape}")
        for arr in self.params.values():
            arr.setflags(write=False)

    @classmethod
    def initialize(cls, vocab: Vocabulary, seed: int, *, hidden: int = HIDDEN,
                   context_limit: int = CONTEXT_LIMIT, dtype=np.float32) -> "PolicyModel":
        rng = np.random.default_rng(seed)
        params = {name: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(dtype)
                  for name, shape in param_shapes(len(vocab), hidden)}
        return cls(vocab, params, context_limit=context_limit)

    @property
    def n_vocab(self) -> int:
        return len(self.vocab)

    @property
    def dtype(self):
        return self.params["embedding"].dtype

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def with_params(self, params: Mapping[str, np.ndarray]) -> "PolicyModel":
        return PolicyModel(self.vocab, params, context_limit=self.context_limit)

    def astype(self, dtype) -> "PolicyModel":
        return self.with_params({k: v.astype(dtype) for k, v in self.params.items()})

    def architecture(self) -> dict:
        return {
            "kind": "pooled-attention-encoder/bag-decoder/copy-gate",
            "hidden": self.hidden,
            "n_vocab": self.n_vocab,
            "max_positions": self.max_positions,
            "context_limit": self.context_limit,
            "params": [[n, list(s)] for n, s in param_shapes(self.n_vocab, self.hidden,
                                                              self.max_positions)],
        }

    def encode(self, goal, prev_obs, cur_obs) -> ContextEncoding:
        return encode_context(self.vocab, goal, prev_obs, cur_obs, self.context_limit)

    def tensors(self, track: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v.astype(np.float64), requires_grad=track, name=k)
                for k, v in self.params.items()}

    def same_params(self, other: "PolicyModel") -> bool:
        return self.params.keys() == other.params.keys() and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params)


# --- forward pieces ------------------------------------------------------------

def encode_batch(P: Mapping[str, Tensor], batch: ContextBatch) -> Tensor:
    """Summary vectors ``(B, d)``."""
    B = batch.ids.shape[0]
    d = P["enc_w"].shape[0]
    X = P["embedding"].take_rows(batch.ids) + P["segment"].take_rows(np.maximum(batch.seg, 0))
    H = (X @ P["enc_w"] + P["enc_b"]).tanh()
    scores = (H @ P["att_query"].swapaxes(0, 1)).swapaxes(1, 2) + batch.att_bias
    pooled = (scores.softmax(-1) @ H) * batch.present
    return (pooled.reshape(B, 3 * d) @ P["summary_w"] + P["summary_b"]).tanh()


def value_from_summary(P: Mapping[str, Tensor], summary: Tensor) -> Tensor:
    h = (summary @ P["value_w1"] + P["value_b1"]).tanh()
    out = h @ P["value_w2"] + P["value_b2"]
    return out.reshape(out.shape[0])


def decode_logits(P: Mapping[str, Tensor], summary_rows: Tensor, goal_rows: np.ndarray,
                  tokens: np.ndarray, valid: np.ndarray) -> Tensor:
    """Next-token logits ``(M, K, N)`` for teacher-forced rows.

    Position ``k`` sees the summary and the tokens ``tokens[:, :k]``.
    """
    M, K = tokens.shape
    d = P["enc_w"].shape[0]
    n_pos = P["dec_pos"].shape[0]
    emb = P["embedding"].take_rows(tokens) * valid[..., None]
    bag = emb.cumsum_exclusive(axis=1)
    pos = P["dec_pos"].take_rows(np.minimum(np.arange(K), n_pos - 1))
    ctx = (summary_rows @ P["dec_ctx_w"]).reshape(M, 1, d)
    state = (ctx + bag @ P["dec_tok_w"] + pos + P["dec_b"]).tanh()
    gate = state @ P["copy_w"] + P["copy_b"]
    n_vocab = goal_rows.shape[1]
    return state @ P["lm_w"] + P["lm_b"] + gate.reshape(M, K, 1) * goal_rows.reshape(M, 1, n_vocab)


def generation_bias(K: int, n_vocab: int) -> np.ndarray:
    """Additive mask for query generation: no specials, no empty query."""
    bias = np.zeros((K, n_vocab))
    bias[:, [PAD_ID, UNK_ID, SEP_ID]] = _MASKED
    bias[0, EOS_ID] = _MASKED
    return bias


def pack_rows(rows: Sequence[Sequence[int]], append_eos: bool = True) -> tuple[np.ndarray, np.ndarray]:
    K = max(len(r) for r in rows) + (1 if append_eos else 0)
    tokens = np.full((len(rows), K), PAD_ID, dtype=np.int64)
    valid = np.zeros((len(rows), K))
    for i, r in enumerate(rows):
        seq = list(r) + ([EOS_ID] if append_eos else [])
        tokens[i, :len(seq)] = seq
        valid[i, :len(seq)] = 1.0
    return tokens, valid


# --- public single-context operations ----------------------------------------------

def _check_ids(model: PolicyModel, ids: Sequence[int]) -> None:
    if any(i < 0 or i >= model.n_vocab for i in ids):
        raise ContractViolation("token id out of vocabulary range")


def token_logprobs(model: PolicyModel, context: ContextEncoding,
                   prefix: Sequence[int]) -> np.ndarray:
    """Log-distribution over the vocabulary for the token after ``prefix``."""
    _check_ids(model, context.token_ids)
    _check_ids(model, prefix)
    with no_grad():
        P = model.tensors()
        batch = ContextBatch.build([context], model.n_vocab)
        summary = encode_batch(P, batch)
        tokens, valid = pack_rows([list(prefix)])
        logits = decode_logits(P, summary, batch.goal_mask, tokens, valid)
        return logits.log_softmax(-1).data[0, len(prefix)]


def estimate_value(model: PolicyModel, context: ContextEncoding) -> float:
    _check_ids(model, context.token_ids)
    with no_grad():
        P = model.tensors()
        summary = encode_batch(P, ContextBatch.build([context], model.n_vocab))
        return float(value_from_summary(P, summary).data[0])


# --- gradients ---------------------------------------------------------------------

@dataclass
class LossRecord:
    """A scalar loss together with the tracked parameter tensors it was built from."""
    loss: Tensor
    params: dict[str, Tensor]
    extras: dict = field(default_factory=dict)


def backward(model: PolicyModel, record: LossRecord) -> dict[str, np.ndarray]:
    """Exact gradient of ``record.loss`` for every parameter (zeros if unused)."""
    if not isinstance(record.loss, Tensor) or not record.loss.requires_grad:
        raise ContractViolation("loss is detached from the parameters; nothing recorded")
    for t in record.params.values():
        t.grad = None
    record.loss.backward()
    grads = {}
    for name in model.params:
        g = record.params[name].grad
        grads[name] = np.zeros(model.params[name].shape) if g is None else g
    return grads


# --- checkpoints ----------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SHOPCKPT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sI32sIIQI")


def architecture_hash(arch: dict) -> bytes:
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode("utf-8")).digest()


def checkpoint_bytes(model: PolicyModel) -> bytes:
    arch = model.architecture()
    desc = json.dumps(arch, sort_keys=True).encode("utf-8")
    flat = np.concatenate([model.params[name].astype("<f4").ravel()
                           for name, _ in param_shapes(model.n_vocab, model.hidden,
                                                       model.max_positions)])
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, architecture_hash(arch),
                          model.n_vocab, model.hidden, flat.size, len(desc))
    return header + desc + flat.tobytes()


def save_checkpoint(model: PolicyModel, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path, vocab: Vocabulary) -> PolicyModel:
    return model_from_bytes(Path(path).read_bytes(), vocab)


def model_from_bytes(blob: bytes, vocab: Vocabulary) -> PolicyModel:
    magic, version, digest, n_vocab, hidden, count, desc_len = _HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ValueError("not a policy checkpoint or unsupported version")
    offset = _HEADER.size
    arch = json.loads(blob[offset:offset + desc_len].decode("utf-8"))
    offset += desc_len
    if architecture_hash(arch) != digest:
        raise ValueError("architecture descriptor hash mismatch")
    if n_vocab != len(vocab):
        raise ValueError(f"checkpoint built for {n_vocab} tokens, vocabulary has {len(vocab)}")
    flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    params, pos = {}, 0
    for name, shape in param_shapes(n_vocab, hidden, arch["max_positions"]):
        size = int(np.prod(shape))
        params[name] = flat[pos:pos + size].reshape(shape).astype(np.float32)
        pos += size
    if pos != count:
        raise ValueError("parameter count mismatch")
    return PolicyModel(vocab, params, context_limit=arch["context_limit"])
