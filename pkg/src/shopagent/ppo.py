"""Clipped-surrogate PPO with GAE over the dynamic-action policy."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .actions import policy_terms
from .autograd import Tensor, as_tensor, where
from .environment import ActionSpec
from .errors import ContractViolation, TrainingAborted
from .model import ContextEncoding, LossRecord, PolicyModel, backward
from .optim import AdamState, adam_step, clip_grad_norm, global_norm

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Transition:
    context: ContextEncoding
    action_index: int
    action_set: tuple[ActionSpec, ...]
    logprob_old: float
    value_old: float
    reward: float
    done: bool


@dataclass
class PPOConfig:
    transitions_per_update: int = 640
    n_envs: int = 16
    epochs_per_update: int = 1
    batch_size: int = 8
    learning_rate: float = 1e-6
    adam_eps: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    discount: float = 0.99
    gae_lambda: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    clip_eps: float = 0.2

    def __post_init__(self):
        if not (0 < self.discount <= 1 and 0 <= self.gae_lambda <= 1):
            raise ValueError("discount must be in (0, 1] and gae_lambda in [0, 1]")
        if self.transitions_per_update % self.n_envs:
            raise ValueError("transitions_per_update must be a multiple of n_envs")

    @property
    def steps_per_env(self) -> int:
        return self.transitions_per_update // self.n_envs


def compute_gae(rewards: Sequence[float], values: Sequence[float], dones: Sequence[bool],
                bootstrap_value: float, discount: float,
                lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and returns for one environment stream, in temporal order."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (len(rewards) == len(values) == len(dones)):
        raise ContractViolation("rewards, values and dones must have equal length")
    n = len(rewards)
    adv = np.zeros(n)
    next_value, next_adv = float(bootstrap_value), 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + discount * next_value * live - values[t]
        next_adv = delta + discount * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


@dataclass
class LossTerms:
    total: Tensor
    policy: Tensor
    value: Tensor
    entropy: Tensor
    ratio: np.ndarray


def ppo_losses(logprob_new, logprob_old, advantage, value_new, return_target, entropy,
               cfg: PPOConfig) -> LossTerms:
    """Minibatch-averaged clipped surrogate, squared value error and entropy."""
    logprob_new, value_new, entropy = as_tensor(logprob_new), as_tensor(value_new), as_tensor(entropy)
    old = np.asarray(logprob_old, dtype=np.float64)
    adv = np.asarray(advantage, dtype=np.float64)
    ret = np.asarray(return_target, dtype=np.float64)
    ratio = (logprob_new - old).exp()
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    clipped = where(ratio.data > hi, hi, where(ratio.data < lo, lo, ratio))
    surr1 = ratio * adv
    surr2 = clipped * adv
    policy = -where(surr1.data <= surr2.data, surr1, surr2).mean()
    value = (value_new - ret).square().mean()
    ent = entropy.mean()
    total = policy + value * cfg.value_coef - ent * cfg.entropy_coef
    return LossTerms(total, policy, value, ent, ratio.data.copy())


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    grad_norms: list[float] = field(default_factory=list)       # after clipping
    raw_grad_norms: list[float] = field(default_factory=list)
    first_ratios: np.ndarray | None = None


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def buffer_targets(buffer, cfg: PPOConfig) -> tuple[list[Transition], np.ndarray, np.ndarray]:
    """Flattened transitions with raw advantages and returns."""
    flat, advs, rets = [], [], []
    for stream, boot in zip(buffer.streams, buffer.bootstrap_values):
        a, r = compute_gae([t.reward for t in stream], [t.value_old for t in stream],
                           [t.done for t in stream], boot, cfg.discount, cfg.gae_lambda)
        flat += stream
        advs.append(a)
        rets.append(r)
    return flat, np.concatenate(advs), np.concatenate(rets)


def ppo_update(model: PolicyModel, buffer, cfg: PPOConfig, rng: np.random.Generator,
               state: AdamState | None = None) -> tuple[PolicyModel, UpdateStats, AdamState]:
    state = state or AdamState()
    flat, adv, ret = buffer_targets(buffer, cfg)
    if len(flat) != cfg.transitions_per_update:
        raise ContractViolation(
            f"buffer holds {len(flat)} transitions, expected {cfg.transitions_per_update}")
    adv = normalize_advantages(adv)
    sums = np.zeros(5)
    n_mb = 0
    stats = UpdateStats(0, 0, 0, 0, 0)
    for epoch in range(cfg.epochs_per_update):
        order = rng.permutation(len(flat))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [flat[i] for i in idx]
            P = model.tensors(track=True)
            terms = policy_terms(model, P, [t.context for t in batch], [t.action_set for t in batch],
                                 [t.action_index for t in batch])
            old = np.array([t.logprob_old for t in batch])
            lt = ppo_losses(terms.logprob, old, adv[idx], terms.value, ret[idx], terms.entropy, cfg)
            if not np.isfinite(lt.total.data):
                raise TrainingAborted(f"non-finite PPO loss at minibatch {n_mb}",
                                      phase="ppo", minibatch=n_mb)
            grads = backward(model, LossRecord(lt.total, P))
            raw = global_norm(grads)
            if not np.isfinite(raw):
                raise TrainingAborted(f"non-finite PPO gradient at minibatch {n_mb}",
                                      phase="ppo", minibatch=n_mb)
            grads, _ = clip_grad_norm(grads, cfg.max_grad_norm)
            params, state = adam_step(model.params, grads, state, lr=cfg.learning_rate,
                                      beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                                      eps=cfg.adam_eps)
            model = model.with_params(params)
            if stats.first_ratios is None:
                stats.first_ratios = lt.ratio
            stats.raw_grad_norms.append(raw)
            stats.grad_norms.append(global_norm(grads))
            log_ratio = np.log(lt.ratio)
            sums += [float(lt.policy.data), float(lt.value.data), float(lt.entropy.data),
                     float(np.mean(np.abs(lt.ratio - 1.0) > cfg.clip_eps)),
                     float(np.mean(lt.ratio - 1.0 - log_ratio))]
            n_mb += 1
    means = sums / max(n_mb, 1)
    stats.policy_loss, stats.value_loss, stats.entropy, stats.clip_fraction, stats.approx_kl = \
        (float(x) for x in means)
    return model, stats, state


STATS_COLUMNS = ("update", "env_steps", "mean_episode_reward", "score_so_far", "policy_loss",
                 "value_loss", "entropy", "clip_fraction", "approx_kl")


def append_stats_row(path: str | Path, row: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=STATS_COLUMNS)
        if new:
            w.writeheader()
        w.writerow({k: row[k] for k in STATS_COLUMNS})
