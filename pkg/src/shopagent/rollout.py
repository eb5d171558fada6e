"""Master/worker rollout collection.

The master owns the environment sessions and the buffer.  Each round it
builds one :class:`ScoreRequest` per stream, hands them to a pool of scoring
workers (whole-model replicas), and consolidates the responses in request
order.  Every request carries its own sampling seed and is scored on its
own, so the buffer does not depend on how many workers there are.

Workers are in-process objects or, through :class:`SocketWorker`, separate
processes speaking a small length-prefixed binary protocol.
"""
from __future__ import annotations

import hashlib
import logging
import multiprocessing as mp
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .actions import Decoding, ScoredActionSet, score_contexts
from .environment import (
    DEFAULT_HORIZON,
    ActionKind,
    ActionSpec,
    Catalog,
    Instruction,
    Observation,
    ShopEnv,
)
from .errors import CollectionAborted, ContractViolation
from .model import ContextEncoding, PolicyModel, checkpoint_bytes, estimate_value, model_from_bytes
from .ppo import Transition
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreRequest:
    stream_id: int
    context: ContextEncoding
    actions: tuple[ActionSpec, ...]
    seed: int


@dataclass(frozen=True)
class ScoreResponse:
    stream_id: int
    scored: ScoredActionSet
    value: float
    snapshot: str = ""


def snapshot_id(model: PolicyModel) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()[:16]


def score_request(model: PolicyModel, req: ScoreRequest, tag: str = "") -> ScoreResponse:
    scored, values = score_contexts(model, [req.context], [req.actions],
                                    [np.random.default_rng(req.seed)])
    return ScoreResponse(req.stream_id, scored[0], float(values[0]), tag)


class Worker:
    """In-process scorer holding one immutable snapshot.

    ``delay`` (seconds) and ``fail_times`` exist to exercise the pool's
    ordering and retry logic.
    """

    def __init__(self, name: str = "worker", *, delay: float = 0.0, fail_times: int = 0):
        self.name = name
        self.delay = delay
        self.fail_times = fail_times
        self.model: PolicyModel | None = None
        self.snapshot = ""
        self.calls = 0

    def load(self, model: PolicyModel, tag: str) -> str:
        self.model, self.snapshot = model, tag
        return tag

    def score(self, requests: Sequence[ScoreRequest]) -> list[ScoreResponse]:
        self.calls += 1
        if self.fail_times > 0:
            self.fail_times -= 1
            raise RuntimeError(f"{self.name}: injected failure")
        if self.model is None:
            raise ContractViolation(f"{self.name} has no snapshot")
        if self.delay:
            time.sleep(self.delay)
        return [score_request(self.model, r, self.snapshot) for r in requests]

    def close(self) -> None:
        pass


class WorkerPool:
    def __init__(self, workers: Sequence[Worker], *, timeout: float = 60.0):
        if not workers:
            raise ContractViolation("a pool needs at least one worker")
        self.workers = list(workers)
        self.timeout = timeout
        self.snapshot = ""
        self._executor = ThreadPoolExecutor(max_workers=len(self.workers))
        self._busy = threading.Lock()
        self.assignments: list[list[int]] = []

    def __len__(self) -> int:
        return len(self.workers)

    @property
    def in_flight(self) -> bool:
        return self._busy.locked()

    def close(self) -> None:
        self._executor.shutdown(wait=True)
        for w in self.workers:
            w.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def assign(self, requests: Sequence[ScoreRequest]) -> list[list[int]]:
        """Request positions per worker, round-robin by stream id."""
        groups: list[list[int]] = [[] for _ in self.workers]
        for pos, req in enumerate(requests):
            groups[req.stream_id % len(self.workers)].append(pos)
        return groups

    def _run(self, worker_index: int, requests: list[ScoreRequest]):
        return self._executor.submit(self.workers[worker_index].score, requests)

    def dispatch(self, requests: Sequence[ScoreRequest]) -> list[ScoreResponse]:
        if not self.snapshot:
            raise ContractViolation("no snapshot registered; call refresh_snapshot first")
        groups = self.assign(requests)
        self.assignments.append([len(g) for g in groups])
        futures = {w: self._run(w, [requests[i] for i in g]) for w, g in enumerate(groups) if g}
        out: list[ScoreResponse | None] = [None] * len(requests)
        for w, fut in futures.items():
            batch = [requests[i] for i in groups[w]]
            try:
                results = fut.result(timeout=self.timeout)
            except (Exception, FutureTimeout) as exc:
                alt = (w + 1) % len(self.workers)
                log.warning("worker %s failed (%s); retrying on %s",
                            self.workers[w].name, exc, self.workers[alt].name)
                try:
                    results = self._run(alt, batch).result(timeout=self.timeout)
                except (Exception, FutureTimeout) as exc2:
                    raise CollectionAborted(
                        f"requests for streams {[r.stream_id for r in batch]} failed on "
                        f"{self.workers[w].name} and {self.workers[alt].name}: {exc2}") from exc2
            if len(results) != len(batch):
                raise CollectionAborted(f"{self.workers[w].name} returned {len(results)} "
                                        f"responses for {len(batch)} requests")
            for pos, resp in zip(groups[w], results):
                if resp.stream_id != requests[pos].stream_id:
                    raise CollectionAborted("response stream id does not match its request")
                out[pos] = resp
        return out  # type: ignore[return-value]


def refresh_snapshot(pool: WorkerPool, model: PolicyModel) -> str:
    """Install ``model`` on every worker; returns the snapshot id they acknowledged."""
    if pool.in_flight:
        raise ContractViolation("cannot refresh the snapshot while a collection is in flight")
    tag = snapshot_id(model)
    failed = []
    for w in pool.workers:
        try:
            ack = w.load(model, tag)
        except Exception as exc:  # noqa: BLE001 - report every failing worker
            log.error("refresh failed on %s: %s", w.name, exc)
            ack = None
        if ack != tag:
            failed.append(w.name)
    if failed:
        pool.snapshot = ""
        raise CollectionAborted(f"snapshot refresh failed on workers {failed}")
    pool.snapshot = tag
    return tag


# --- environment sessions and collection -------------------------------------------------

class EnvSession:
    """One environment stream: the env plus the last two observations."""

    def __init__(self, catalog: Catalog, goals: Callable[[], Instruction], *,
                 horizon: int = DEFAULT_HORIZON):
        self.env = ShopEnv(catalog, horizon=horizon)
        self.goals = goals
        self.prev: Observation | None = None
        self.obs: Observation | None = None
        self.instruction: Instruction | None = None

    def reset(self) -> None:
        self.instruction = self.goals()
        self.obs = self.env.reset(self.instruction)
        self.prev = None

    def context(self, model: PolicyModel, obs_history: int) -> ContextEncoding:
        prev = self.prev if obs_history >= 2 else None
        return model.encode(self.instruction.goal_text, prev, self.obs)

    def step(self, action: ActionSpec) -> tuple[float, bool]:
        obs, reward, done = self.env.step(action)
        self.prev, self.obs = self.obs, obs
        return reward, done


@dataclass
class RolloutBuffer:
    streams: list[list[Transition]]
    bootstrap_values: list[float]
    episode_rewards: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(s) for s in self.streams)

    def transitions(self) -> list[Transition]:
        return [t for s in self.streams for t in s]

    def fingerprint(self) -> str:
        """Digest over every recorded number and token, for bit-identity checks."""
        h = hashlib.sha256()
        for s in self.streams:
            for t in s:
                h.update(np.asarray(t.context.token_ids, dtype="<i8").tobytes())
                h.update(np.asarray(t.context.segments, dtype="<i8").tobytes())
                h.update(repr([(a.kind.value, a.surface) for a in t.action_set]).encode())
                h.update(struct.pack("<qdddq", t.action_index, t.logprob_old, t.value_old,
                                     t.reward, int(t.done)))
        h.update(np.asarray(self.bootstrap_values, dtype="<f8").tobytes())
        return h.hexdigest()


def collect(pool: WorkerPool, model: PolicyModel, sessions: Sequence[EnvSession],
            steps_per_env: int, decoding: Decoding, rng: np.random.Generator, *,
            obs_history: int = 2) -> RolloutBuffer:
    """Lockstep collection: one dispatch round per environment step across all streams."""
    if pool.snapshot != snapshot_id(model):
        raise ContractViolation("pool snapshot differs from the collection snapshot")
    if not pool._busy.acquire(blocking=False):
        raise ContractViolation("another collection is already in flight")
    try:
        for s in sessions:
            if s.obs is None:
                s.reset()
        streams: list[list[Transition]] = [[] for _ in sessions]
        finished: list[float] = []
        for _ in range(steps_per_env):
            contexts = [s.context(model, obs_history) for s in sessions]
            seeds = rng.integers(0, 2**63, size=len(sessions))
            requests = [ScoreRequest(i, contexts[i], sessions[i].obs.actions, int(seeds[i]))
                        for i in range(len(sessions))]
            responses = pool.dispatch(requests)
            for i, (s, resp) in enumerate(zip(sessions, responses)):
                if resp.snapshot != pool.snapshot:
                    raise CollectionAborted(f"stream {i} scored on a stale snapshot")
                idx = decoding.choose(resp.scored.probs, rng)
                action = resp.scored.actions[idx]
                reward, done = s.step(action)
                streams[i].append(Transition(contexts[i], idx, resp.scored.actions,
                                             resp.scored.policy_logprob(idx), resp.value,
                                             reward, done))
                if done:
                    finished.append(reward)
                    s.reset()
        boot = [0.0 if st[-1].done else estimate_value(model, s.context(model, obs_history))
                for st, s in zip(streams, sessions)]
        return RolloutBuffer(streams, boot, finished)
    finally:
        pool._busy.release()


# --- wire format ----------------------------------------------------------------------
# frame := u32 length | u8 kind | payload, length counts kind + payload.
# All integers little-endian; reals are f64 so scores survive the trip bit for bit.

MSG_SNAPSHOT, MSG_ACK, MSG_SCORE, MSG_RESULT, MSG_ERROR, MSG_SHUTDOWN = 1, 2, 3, 4, 5, 6
_KIND_CODES = {ActionKind.SEARCH_QUERY: 0, ActionKind.CLICK: 1}
_KIND_FROM = {v: k for k, v in _KIND_CODES.items()}


def encode_frame(kind: int, payload: bytes) -> bytes:
    return struct.pack("<IB", len(payload) + 1, kind) + payload


def decode_frame(buf: bytes) -> tuple[int, bytes, bytes]:
    """Split one frame off ``buf``; returns (kind, payload, rest)."""
    if len(buf) < 5:
        raise ValueError("incomplete frame header")
    length, kind = struct.unpack_from("<IB", buf, 0)
    end = 4 + length
    if len(buf) < end:
        raise ValueError("incomplete frame body")
    return kind, buf[5:end], buf[end:]


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, x):
        self.parts.append(struct.pack("<B", x))

    def u32(self, x):
        self.parts.append(struct.pack("<I", x))

    def u64(self, x):
        self.parts.append(struct.pack("<Q", x))

    def f64(self, x):
        self.parts.append(struct.pack("<d", x))

    def ids(self, xs):
        self.u32(len(xs))
        self.parts.append(np.asarray(xs, dtype="<u4").tobytes())

    def blob(self, b: bytes):
        self.u32(len(b))
        self.parts.append(b)

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def _take(self, fmt):
        (x,) = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += struct.calcsize(fmt)
        return x

    def u8(self):
        return self._take("<B")

    def u32(self):
        return self._take("<I")

    def u64(self):
        return self._take("<Q")

    def f64(self):
        return self._take("<d")

    def ids(self) -> list[int]:
        n = self.u32()
        out = np.frombuffer(self.data, dtype="<u4", count=n, offset=self.pos)
        self.pos += 4 * n
        return [int(x) for x in out]

    def blob(self) -> bytes:
        n = self.u32()
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b


def _write_actions(w: _Writer, actions, vocab: Vocabulary):
    w.u32(len(actions))
    for a in actions:
        w.u8(_KIND_CODES[a.kind])
        w.ids(vocab.encode(a.surface))


def _read_actions(r: _Reader, vocab: Vocabulary) -> tuple[ActionSpec, ...]:
    return tuple(ActionSpec(_KIND_FROM[r.u8()], vocab.decode(r.ids())) for _ in range(r.u32()))


def encode_requests(requests: Sequence[ScoreRequest], vocab: Vocabulary) -> bytes:
    w = _Writer()
    w.u32(len(requests))
    for q in requests:
        w.u32(q.stream_id)
        w.u64(q.seed)
        w.ids(q.context.token_ids)
        w.ids(q.context.segments)
        _write_actions(w, q.actions, vocab)
    return w.bytes()


def decode_requests(payload: bytes, vocab: Vocabulary) -> list[ScoreRequest]:
    r = _Reader(payload)
    out = []
    for _ in range(r.u32()):
        sid, seed = r.u32(), r.u64()
        ctx = ContextEncoding(tuple(r.ids()), tuple(r.ids()))
        out.append(ScoreRequest(sid, ctx, _read_actions(r, vocab), seed))
    return out


def encode_responses(responses: Sequence[ScoreResponse], vocab: Vocabulary) -> bytes:
    w = _Writer()
    w.u32(len(responses))
    for resp in responses:
        s = resp.scored
        w.u32(resp.stream_id)
        w.f64(resp.value)
        w.blob(resp.snapshot.encode("ascii"))
        _write_actions(w, s.actions, vocab)
        for arr in (s.mean_logprobs, s.probs):
            w.parts.append(np.asarray(arr, dtype="<f8").tobytes())
    return w.bytes()


def decode_responses(payload: bytes, vocab: Vocabulary) -> list[ScoreResponse]:
    r = _Reader(payload)
    out = []
    for _ in range(r.u32()):
        sid, value = r.u32(), r.f64()
        tag = r.blob().decode("ascii")
        actions = _read_actions(r, vocab)
        arrays = []
        for _ in range(2):
            arrays.append(np.frombuffer(r.data, dtype="<f8", count=len(actions), offset=r.pos).copy())
            r.pos += 8 * len(actions)
        out.append(ScoreResponse(sid, ScoredActionSet(actions, *arrays), value, tag))
    return out


def encode_snapshot(model: PolicyModel, tag: str) -> bytes:
    w = _Writer()
    w.blob(tag.encode("ascii"))
    w.blob("\n".join(model.vocab.tokens).encode("utf-8"))
    w.blob(checkpoint_bytes(model))
    return w.bytes()


def decode_snapshot(payload: bytes) -> tuple[PolicyModel, str]:
    r = _Reader(payload)
    tag = r.blob().decode("ascii")
    tokens = r.blob().decode("utf-8").split("\n")
    vocab = Vocabulary(tokens[4:])
    return model_from_bytes(r.blob(), vocab), tag


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        b = sock.recv(n - got)
        if not b:
            raise ConnectionError("peer closed the connection")
        chunks.append(b)
        got += len(b)
    return b"".join(chunks)


def send_frame(sock: socket.socket, kind: int, payload: bytes) -> None:
    sock.sendall(encode_frame(kind, payload))


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    body = _recv_exact(sock, length)
    return body[0], body[1:]


def serve_worker(sock: socket.socket) -> None:
    """Worker-side loop: answer snapshot and score frames until shutdown."""
    model, tag = None, ""
    try:
        while True:
            kind, payload = recv_frame(sock)
            if kind == MSG_SHUTDOWN:
                return
            try:
                if kind == MSG_SNAPSHOT:
                    model, tag = decode_snapshot(payload)
                    send_frame(sock, MSG_ACK, tag.encode("ascii"))
                elif kind == MSG_SCORE:
                    if model is None:
                        raise ContractViolation("no snapshot loaded")
                    reqs = decode_requests(payload, model.vocab)
                    resps = [score_request(model, q, tag) for q in reqs]
                    send_frame(sock, MSG_RESULT, encode_responses(resps, model.vocab))
                else:
                    raise ValueError(f"unknown message kind {kind}")
            except Exception as exc:  # noqa: BLE001 - forwarded to the master
                send_frame(sock, MSG_ERROR, str(exc).encode("utf-8"))
    except ConnectionError:
        return
    finally:
        sock.close()


def _process_main(sock: socket.socket) -> None:
    serve_worker(sock)


class SocketWorker(Worker):
    """Scorer running in a child process, reached over a socket pair."""

    def __init__(self, name: str = "socket-worker"):
        super().__init__(name)
        ctx = mp.get_context("fork")
        parent, child = socket.socketpair()
        self._proc = ctx.Process(target=_process_main, args=(child,), daemon=True)
        self._proc.start()
        child.close()
        self._sock = parent
        self._lock = threading.Lock()
        self._vocab: Vocabulary | None = None

    def _call(self, kind: int, payload: bytes) -> tuple[int, bytes]:
        with self._lock:
            send_frame(self._sock, kind, payload)
            reply_kind, reply = recv_frame(self._sock)
        if reply_kind == MSG_ERROR:
            raise RuntimeError(f"{self.name}: {reply.decode('utf-8')}")
        return reply_kind, reply

    def load(self, model: PolicyModel, tag: str) -> str:
        _, reply = self._call(MSG_SNAPSHOT, encode_snapshot(model, tag))
        self._vocab = model.vocab
        self.snapshot = reply.decode("ascii")
        return self.snapshot

    def score(self, requests: Sequence[ScoreRequest]) -> list[ScoreResponse]:
        self.calls += 1
        if self._vocab is None:
            raise ContractViolation(f"{self.name} has no snapshot")
        _, reply = self._call(MSG_SCORE, encode_requests(requests, self._vocab))
        return decode_responses(reply, self._vocab)

    def close(self) -> None:
        try:
            with self._lock:
                send_frame(self._sock, MSG_SHUTDOWN, b"")
        except OSError:
            pass
        self._sock.close()
        self._proc.join(timeout=5)
