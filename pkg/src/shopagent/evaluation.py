"""Score / Success Rate evaluation and the uniform-random reference policy."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .actions import STRATEGIES, Decoding, ScoredActionSet, score_contexts
from .environment import (
    DEFAULT_HORIZON,
    ActionKind,
    ActionSpec,
    Catalog,
    Instruction,
    Observation,
    ShopEnv,
)
from .model import PolicyModel
from .tokenizer import SEP_ID, Vocabulary

EVAL_EPISODES = 200
EVAL_RUNS = 4


def score_and_success(rewards: Sequence[float]) -> tuple[float, float]:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return 0.0, 0.0
    return 100.0 * float(r.mean()), 100.0 * float(np.mean(r == 1.0))


@dataclass
class EvalReport:
    score: float
    success_rate: float
    n_episodes: int
    n_runs: int
    decoding: str
    seeds: list[int]
    per_run: list[dict] = field(default_factory=list)
    rewards: list[list[float]] = field(default_factory=list)

    @classmethod
    def from_rewards(cls, rewards: list[list[float]], decoding: str, seeds: list[int]) -> "EvalReport":
        per_run = []
        for run, rs in zip(seeds, rewards):
            s, sr = score_and_success(rs)
            per_run.append({"seed": run, "score": s, "success_rate": sr})
        return cls(score=float(np.mean([p["score"] for p in per_run])),
                   success_rate=float(np.mean([p["success_rate"] for p in per_run])),
                   n_episodes=len(rewards[0]) if rewards else 0, n_runs=len(rewards),
                   decoding=decoding, seeds=list(seeds), per_run=per_run, rewards=rewards)

    def summary(self) -> str:
        lines = [f"decoding      {self.decoding}",
                 f"score         {self.score:.2f}",
                 f"success rate  {self.success_rate:.2f}",
                 f"episodes      {self.n_episodes} x {self.n_runs} runs"]
        for p in self.per_run:
            lines.append(f"  run seed {p['seed']}: score {p['score']:.2f} "
                         f"success {p['success_rate']:.2f}")
        return "\n".join(lines)

    def write(self, out_dir: str | Path, stem: str = "eval_report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.txt").write_text(self.summary() + "\n", encoding="utf-8")
        with open(out / f"{stem}.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(self)) + "\n")


def read_reports(path: str | Path) -> list[EvalReport]:
    with open(path, encoding="utf-8") as fh:
        return [EvalReport(**json.loads(line)) for line in fh if line.strip()]


@dataclass
class StepTrace:
    observation: Observation
    dist: ScoredActionSet
    chosen: int
    reward: float


def run_episodes(model: PolicyModel, catalog: Catalog, goals: Sequence[Instruction],
                 decoding: Decoding, seed: int, *, obs_history: int = 2,
                 horizon: int = DEFAULT_HORIZON,
                 trace: Callable[[int, StepTrace], None] | None = None) -> list[float]:
    """Play one episode per goal, all in lockstep; returns the final rewards.

    Episode ``i`` draws from its own generator seeded by ``(seed, i)``.
    """
    envs = [ShopEnv(catalog, horizon=horizon) for _ in goals]
    rngs = [np.random.default_rng([seed, i]) for i in range(len(goals))]
    obs = [env.reset(g) for env, g in zip(envs, goals)]
    prev: list[Observation | None] = [None] * len(goals)
    rewards = [0.0] * len(goals)
    live = list(range(len(goals)))
    while live:
        contexts = [model.encode(goals[i].goal_text, prev[i] if obs_history >= 2 else None, obs[i])
                    for i in live]
        scored, _ = score_contexts(model, contexts, [obs[i].actions for i in live],
                                   [rngs[i] for i in live])
        still = []
        for i, dist in zip(live, scored):
            idx = decoding.choose(dist.probs, rngs[i])
            new_obs, reward, done = envs[i].step(dist.actions[idx])
            if trace:
                trace(i, StepTrace(obs[i], dist, idx, reward))
            prev[i], obs[i] = obs[i], new_obs
            if done:
                rewards[i] = reward
            else:
                still.append(i)
        live = still
    return rewards


def evaluate(model: PolicyModel, catalog: Catalog, goals: Sequence[Instruction],
             decoding: Decoding, runs: int = EVAL_RUNS, seed: int = 0, *,
             obs_history: int = 2, horizon: int = DEFAULT_HORIZON) -> EvalReport:
    seeds = [seed * 1000 + r for r in range(runs)]
    rewards = [run_episodes(model, catalog, goals, decoding, s, obs_history=obs_history,
                            horizon=horizon) for s in seeds]
    return EvalReport.from_rewards(rewards, decoding.name, seeds)


def compare_decodings(model: PolicyModel, catalog: Catalog, goals: Sequence[Instruction],
                      runs: int = EVAL_RUNS, seed: int = 0, *, epsilon: float = 0.2,
                      top_p: float = 0.8, obs_history: int = 2,
                      horizon: int = DEFAULT_HORIZON) -> list[EvalReport]:
    return [evaluate(model, catalog, goals, Decoding(name, epsilon, top_p), runs, seed,
                     obs_history=obs_history, horizon=horizon) for name in STRATEGIES]


def format_comparison(reports: Sequence[EvalReport]) -> str:
    lines = [f"{'decoding':<10} {'score':>8} {'success':>8}"]
    for r in reports:
        lines.append(f"{r.decoding:<10} {r.score:8.2f} {r.success_rate:8.2f}")
    return "\n".join(lines)


# --- random reference policy ------------------------------------------------------------

def random_action(obs: Observation, vocab: Vocabulary, rng: np.random.Generator,
                  max_query: int = 8) -> ActionSpec:
    """Uniform over the presented actions; a query is 1-8 uniform vocabulary words."""
    a = obs.actions[int(rng.integers(len(obs.actions)))]
    if a.kind is ActionKind.SEARCH_QUERY and not a.surface:
        n = int(rng.integers(1, max_query + 1))
        ids = rng.integers(SEP_ID + 1, len(vocab), size=n)
        a = ActionSpec(ActionKind.SEARCH_QUERY, vocab.decode(ids))
    return a


def random_baseline(catalog: Catalog, vocab: Vocabulary, goals: Sequence[Instruction],
                    seed: int = 0, *, horizon: int = DEFAULT_HORIZON) -> EvalReport:
    rng = np.random.default_rng([seed, 0x5EED])
    rewards = []
    env = ShopEnv(catalog, horizon=horizon)
    for g in goals:
        obs, done, reward = env.reset(g), False, 0.0
        while not done:
            obs, reward, done = env.step(random_action(obs, vocab, rng))
        rewards.append(reward)
    return EvalReport.from_rewards([rewards], "random", [seed])
