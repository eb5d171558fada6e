"""Behavioral cloning from scripted demonstrations."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .actions import ScoredActionSet, policy_terms, score_contexts
from .environment import (
    BUY_NOW,
    DEFAULT_HORIZON,
    NEXT,
    RESULTS_PER_PAGE,
    ActionKind,
    ActionSpec,
    Catalog,
    GoalStream,
    Instruction,
    Observation,
    PageKind,
    Product,
    ShopEnv,
    query,
    type_match,
)
from .errors import ContractViolation, TrainingAborted
from .model import ContextEncoding, LossRecord, PolicyModel, backward
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Demonstration:
    instruction: Instruction
    steps: tuple[tuple[Observation, ActionSpec], ...]
    final_reward: float
    source_category: str

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class BCConfig:
    epochs: int = 10
    learning_rate: float = 2e-5
    warmup_steps: int = 100
    weight_decay: float = 0.01
    batch_size: int = 32
    adam_eps: float = 1e-8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError(f"invalid BC config: {self}")


# --- oracle ---------------------------------------------------------------------

def best_attainable(product: Product, instruction: Instruction) -> tuple[float, dict[str, str]]:
    """Highest reward buying ``product`` can earn, and the option picks that earn it."""
    picks = {name: value for name, value in instruction.required_options.items()
             if value in product.options.get(name, ())}
    num = (len(instruction.required_attributes & product.attributes) + len(picks)
           + (1 if product.price <= instruction.price_cap else 0))
    denom = len(instruction.required_attributes) + len(instruction.required_options) + 1
    return type_match(product, instruction) * num / denom, picks


def oracle_target(catalog: Catalog, instruction: Instruction) -> Product:
    """The instruction's target, unless some other product strictly beats it."""
    target = catalog.get(instruction.target_id)
    best, best_r = target, best_attainable(target, instruction)[0]
    for p in catalog.products:
        r = best_attainable(p, instruction)[0]
        if r > best_r:
            best, best_r = p, r
    return best


def oracle_demonstrate(catalog: Catalog, instruction: Instruction,
                       rng: np.random.Generator | None = None, *,
                       horizon: int = DEFAULT_HORIZON,
                       per_page: int = RESULTS_PER_PAGE) -> Demonstration:
    """Scripted expert: search by product type, page to the product, pick options, buy.

    ``rng`` is accepted for interface symmetry; the script is deterministic.
    """
    try:
        catalog.get(instruction.target_id)
    except KeyError:
        raise ContractViolation(f"target {instruction.target_id} not in catalog") from None
    product = oracle_target(catalog, instruction)
    _, picks = best_attainable(product, instruction)
    env = ShopEnv(catalog, horizon=horizon, per_page=per_page)
    obs = env.reset(instruction)
    steps: list[tuple[Observation, ActionSpec]] = []
    reward, done = 0.0, False

    def act(a: ActionSpec):
        nonlocal obs, reward, done
        if done:
            raise ContractViolation(
                f"oracle ran out of horizon ({horizon}) before buying product {product.id}")
        steps.append((obs, a))
        obs, reward, done = env.step(a)

    act(query(product.product_type))
    target_click = ActionSpec(ActionKind.CLICK, product.title)
    while target_click not in obs.actions:
        if NEXT not in obs.actions:
            raise ContractViolation(f"product {product.id} unreachable by its type query")
        act(NEXT)
    act(target_click)
    for name in sorted(picks):
        act(ActionSpec(ActionKind.CLICK, (picks[name],)))
    act(BUY_NOW)
    return Demonstration(instruction, tuple(steps), reward, instruction.source_category)


def generate_demos(catalog: Catalog, n: int, seed: int, *, category: str | None = None,
                   horizon: int = DEFAULT_HORIZON) -> list[Demonstration]:
    stream = GoalStream(catalog, seed, "demo", category)
    return [oracle_demonstrate(catalog, ins, horizon=horizon) for ins in stream.take(n)]


def filter_by_category(demos: Iterable[Demonstration], category: str) -> list[Demonstration]:
    return [d for d in demos if d.source_category == category]


# --- contexts and loss ------------------------------------------------------------

def step_contexts(model: PolicyModel, instruction: Instruction,
                  observations: Sequence[Observation], obs_history: int = 2) -> list[ContextEncoding]:
    out = []
    for t, obs in enumerate(observations):
        prev = observations[t - 1] if obs_history >= 2 and t > 0 else None
        out.append(model.encode(instruction.goal_text, prev, obs))
    return out


def teacher_forced_set(obs: Observation, action: ActionSpec) -> tuple[tuple[ActionSpec, ...], int]:
    """The observation's action set with the demonstrated query in the query slot."""
    acts = list(obs.actions)
    for i, a in enumerate(acts):
        if action.kind is ActionKind.SEARCH_QUERY and a.kind is ActionKind.SEARCH_QUERY:
            if not action.surface:
                raise ContractViolation("demonstrated query is empty")
            acts[i] = action
            return tuple(acts), i
        if a == action:
            return tuple(acts), i
    raise ContractViolation(f"demonstrated action {action} not in the action set")


def _flatten(model: PolicyModel, demos: Sequence[Demonstration], obs_history: int):
    contexts, sets, chosen, owner = [], [], [], []
    for k, demo in enumerate(demos):
        obs_seq = [o for o, _ in demo.steps]
        contexts += step_contexts(model, demo.instruction, obs_seq, obs_history)
        for obs, action in demo.steps:
            acts, idx = teacher_forced_set(obs, action)
            sets.append(acts)
            chosen.append(idx)
            owner.append(k)
    return contexts, sets, np.array(chosen), np.array(owner)


def bc_objective(model: PolicyModel, demos: Sequence[Demonstration], *, obs_history: int = 2,
                 P=None) -> LossRecord:
    """Mean over demos of the summed per-step negative log-likelihood.

    Each step's likelihood is the softmax-over-set probability of the
    demonstrated action, with the demonstrated query in the query slot.
    """
    if not demos:
        raise ContractViolation("no demonstrations")
    P = P if P is not None else model.tensors(track=True)
    contexts, sets, chosen, _ = _flatten(model, demos, obs_history)
    terms = policy_terms(model, P, contexts, sets, chosen)
    return LossRecord(-terms.logprob.sum() * (1.0 / len(demos)), P)


def bc_loss(model: PolicyModel, demonstration: Demonstration, *, obs_history: int = 2) -> float:
    rec = bc_objective(model, [demonstration], obs_history=obs_history, P=model.tensors())
    return float(rec.loss.data)


# --- training ---------------------------------------------------------------------

@dataclass
class BCResult:
    model: PolicyModel
    epoch_losses: list[float]
    optimizer: AdamState


def train_bc(model: PolicyModel, demos: Sequence[Demonstration], cfg: BCConfig, seed: int, *,
             obs_history: int = 2,
             on_epoch: Callable[[int, float], None] | None = None) -> BCResult:
    if not demos:
        raise ContractViolation("train_bc needs at least one demonstration")
    rng = np.random.default_rng([seed, 0xBC])
    state = AdamState()
    losses = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(demos))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [demos[i] for i in order[start:start + cfg.batch_size]]
            rec = bc_objective(model, batch, obs_history=obs_history)
            loss = float(rec.loss.data)
            if not np.isfinite(loss):
                raise TrainingAborted(f"non-finite BC loss at minibatch {step}",
                                      phase="bc", minibatch=step)
            grads = backward(model, rec)
            try:
                params, state = adam_step(
                    model.params, grads, state, lr=cfg.learning_rate, beta1=cfg.adam_beta1,
                    beta2=cfg.adam_beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
                    warmup_steps=cfg.warmup_steps)
            except ContractViolation as exc:
                raise TrainingAborted(str(exc), phase="bc", minibatch=step) from exc
            model = model.with_params(params)
            total += loss * len(batch)
            count += len(batch)
            step += 1
        losses.append(total / count)
        log.info("bc epoch %d loss %.4f", epoch, losses[-1])
        if on_epoch:
            on_epoch(epoch, losses[-1])
    return BCResult(model, losses, state)


def next_action_agreement(model: PolicyModel, demos: Sequence[Demonstration], *,
                          obs_history: int = 2) -> float:
    """Fraction of demonstrated steps where the argmax action is the demonstrated one."""
    hits = total = 0
    for demo in demos:
        contexts, sets, chosen, _ = _flatten(model, [demo], obs_history)
        scored, _ = score_contexts(model, contexts, sets)
        for s, c in zip(scored, chosen):
            hits += int(np.argmax(s.probs) == c)
            total += 1
    return hits / max(total, 1)


def step_distributions(model: PolicyModel, demo: Demonstration, *,
                       obs_history: int = 2) -> list[ScoredActionSet]:
    contexts, sets, _, _ = _flatten(model, [demo], obs_history)
    return score_contexts(model, contexts, sets)[0]


# --- demonstration files ----------------------------------------------------------------

def demo_to_record(demo: Demonstration) -> dict:
    return {
        "instruction": demo.instruction.to_record(),
        "steps": [[obs.page_kind.value, action.kind.value, list(action.surface)]
                  for obs, action in demo.steps],
        "final_reward": demo.final_reward,
        "category": demo.source_category,
    }


def demo_from_record(rec: dict, catalog: Catalog, *, horizon: int = DEFAULT_HORIZON,
                     per_page: int = RESULTS_PER_PAGE) -> Demonstration:
    """Rebuild a demonstration by replaying it; raises if the replay disagrees."""
    ins = Instruction.from_record(rec["instruction"])
    env = ShopEnv(catalog, horizon=horizon, per_page=per_page)
    obs = env.reset(ins)
    steps, reward = [], 0.0
    for page_kind, kind, surface in rec["steps"]:
        if obs.page_kind is not PageKind(page_kind):
            raise ValueError(f"replay diverged: expected {page_kind} page, got {obs.page_kind.value}")
        action = ActionSpec(ActionKind(kind), tuple(surface))
        steps.append((obs, action))
        obs, reward, _ = env.step(action)
    if reward != rec["final_reward"]:
        raise ValueError(f"replay reward {reward} != recorded {rec['final_reward']}")
    return Demonstration(ins, tuple(steps), reward, rec["category"])


def save_demos(demos: Iterable[Demonstration], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in demos:
            fh.write(json.dumps(demo_to_record(d)) + "\n")


def load_demos(path: str | Path, catalog: Catalog, **kw) -> list[Demonstration]:
    with open(path, encoding="utf-8") as fh:
        return [demo_from_record(json.loads(line), catalog, **kw) for line in fh if line.strip()]
