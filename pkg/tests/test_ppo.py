from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shopagent.actions import Decoding, score_contexts
from shopagent.environment import BACK_TO_SEARCH, PREV, GoalStream, ShopEnv, click, query
from shopagent.errors import ContractViolation
from shopagent.model import PolicyModel
from shopagent.optim import AdamState
from shopagent.ppo import (
    STATS_COLUMNS,
    PPOConfig,
    Transition,
    append_stats_row,
    buffer_targets,
    compute_gae,
    normalize_advantages,
    ppo_losses,
    ppo_update,
)
from shopagent.rollout import EnvSession, RolloutBuffer, Worker, WorkerPool, collect, refresh_snapshot


def unrolled_gae(rewards, values, dones, bootstrap, gamma, lam):
    """Direct sum of discounted TD residuals, truncated at episode ends."""
    n = len(rewards)
    nxt = list(values[1:]) + [bootstrap]
    delta = [rewards[t] + gamma * nxt[t] * (1 - dones[t]) - values[t] for t in range(n)]
    adv = []
    for t in range(n):
        total, coef = 0.0, 1.0
        for k in range(t, n):
            total += coef * delta[k]
            if dones[k]:
                break
            coef *= gamma * lam
        adv.append(total)
    return np.array(adv)


def random_episode(rng, n=None):
    n = n or int(rng.integers(1, 41))
    dones = rng.random(n) < 0.15
    rewards = np.where(dones, rng.random(n), 0.0)
    return rewards, rng.normal(size=n), dones, float(rng.normal())


def test_gae_against_unrolled_sum():
    rng = np.random.default_rng(0)
    for _ in range(200):
        r, v, d, b = random_episode(rng, 10)
        adv, ret = compute_gae(r, v, d, b, 0.99, 0.99)
        assert np.allclose(adv, unrolled_gae(r, v, d, b, 0.99, 0.99), atol=1e-10, rtol=0)
        assert np.allclose(ret, adv + v, atol=1e-12)


def test_gae_base_cases():
    adv, ret = compute_gae([0.7], [0.2], [True], 5.0, 0.99, 0.99)
    assert adv[0] == pytest.approx(0.5) and ret[0] == pytest.approx(0.7)
    r, v, d = [0.0, 0.0, 1.0], [0.1, 0.3, 0.2], [False, False, True]
    adv, _ = compute_gae(r, v, d, 0.0, 0.9, 0.0)
    assert np.allclose(adv, [0.9 * 0.3 - 0.1, 0.9 * 0.2 - 0.3, 1.0 - 0.2])
    with pytest.raises(ContractViolation):
        compute_gae([0.0], [0.0, 1.0], [False], 0.0, 0.9, 0.9)


def test_terminal_reward_return():
    gamma = 0.99
    rewards = [0, 0, 0, 0, 1.0]
    values = np.random.default_rng(1).normal(size=5)
    _, ret = compute_gae(rewards, values, [0, 0, 0, 0, 1], 0.0, gamma, 1.0)
    assert ret[0] == pytest.approx(gamma**4, abs=1e-10)


def test_ppo_loss_examples():
    cfg = PPOConfig()
    z = np.zeros(1)
    t = ppo_losses(np.array([-1.0]), np.array([-1.0]), np.array([0.7]), z, z, z, cfg)
    assert float(t.policy.data) == pytest.approx(-0.7)
    t = ppo_losses(np.array([np.log(2.0)]), np.array([0.0]), np.array([1.5]), z, z, z, cfg)
    assert float(t.policy.data) == pytest.approx(-1.2 * 1.5)
    t = ppo_losses(np.array([np.log(0.5)]), np.array([0.0]), np.array([-1.0]), z, z, z, cfg)
    assert float(t.policy.data) == pytest.approx(0.8)


def test_total_combines_terms():
    cfg = PPOConfig()
    lp = np.array([-0.5, -1.0])
    t = ppo_losses(lp, lp, np.array([1.0, -1.0]), np.array([0.5, 0.0]), np.array([0.0, 1.0]),
                   np.array([0.6, 0.2]), cfg)
    assert float(t.value.data) == pytest.approx((0.25 + 1.0) / 2)
    assert float(t.entropy.data) == pytest.approx(0.4)
    assert float(t.total.data) == pytest.approx(0.0 + 0.5 * 0.625 - 0.01 * 0.4)


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-5, 5))
def test_clipped_objective_bound(log_ratio, adv):
    cfg = PPOConfig()
    t = ppo_losses(np.array([log_ratio]), np.zeros(1), np.array([adv]), np.zeros(1),
                   np.zeros(1), np.zeros(1), cfg)
    ratio = np.exp(log_ratio)
    assert float(t.policy.data) >= -max(ratio * adv, (1 - 0.2) * adv, (1 + 0.2) * adv) - 1e-12


def test_config_defaults_and_validation():
    cfg = PPOConfig()
    assert (cfg.transitions_per_update, cfg.n_envs, cfg.steps_per_env) == (640, 16, 40)
    assert (cfg.batch_size, cfg.learning_rate, cfg.adam_eps, cfg.clip_eps) == (8, 1e-6, 1e-5, 0.2)
    assert (cfg.discount, cfg.gae_lambda, cfg.entropy_coef, cfg.value_coef) == (0.99, 0.99, 0.01, 0.5)
    with pytest.raises(ValueError):
        PPOConfig(discount=0.0)
    with pytest.raises(ValueError):
        PPOConfig(transitions_per_update=100)


@pytest.fixture(scope="module")
def small_buffer(model, catalog):
    cfg = PPOConfig(transitions_per_update=64, n_envs=8)
    goals = GoalStream(catalog, 3, "train")
    sessions = [EnvSession(catalog, goals) for _ in range(cfg.n_envs)]
    with WorkerPool([Worker()]) as pool:
        refresh_snapshot(pool, model)
        buf = collect(pool, model, sessions, cfg.steps_per_env, Decoding("sample"),
                      np.random.default_rng(0))
    return cfg, buf


def test_update_statistics(model, small_buffer):
    cfg, buf = small_buffer
    new, stats, state = ppo_update(model, buf, cfg, np.random.default_rng(0))
    assert np.allclose(stats.first_ratios, 1.0, atol=1e-6)
    assert 0.0 <= stats.clip_fraction <= 1.0
    assert len(stats.grad_norms) == 64 // 8
    assert all(n <= 0.5 + 1e-6 for n in stats.grad_norms)
    assert state.step == 8
    assert not new.same_params(model)


def test_zero_learning_rate_keeps_model(model, small_buffer):
    cfg, buf = small_buffer
    zero = PPOConfig(transitions_per_update=64, n_envs=8, learning_rate=0.0)
    new, stats, _ = ppo_update(model, buf, zero, np.random.default_rng(0))
    assert new.same_params(model)
    assert np.isfinite([stats.policy_loss, stats.value_loss, stats.entropy, stats.approx_kl]).all()


def test_buffer_size_enforced(model, small_buffer):
    _, buf = small_buffer
    with pytest.raises(ContractViolation):
        ppo_update(model, buf, PPOConfig(), np.random.default_rng(0))


def test_advantage_normalisation(small_buffer):
    cfg, buf = small_buffer
    _, adv, _ = buffer_targets(buf, cfg)
    n = normalize_advantages(adv)
    sigma = adv.std()
    assert abs(n.mean()) < 1e-6
    assert n.std() == pytest.approx(sigma / (sigma + 1e-8), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=640))
def test_advantage_normalisation_moments(values):
    adv = np.array(values)
    if adv.std() < 0.01:
        return
    n = normalize_advantages(adv)
    assert abs(n.mean()) < 1e-6 and abs(n.std() - 1.0) < 1e-6


def test_two_action_bandit(vocab, catalog, goals):
    """Single-step episodes, reward 1 for action 0 only."""
    env = ShopEnv(catalog)
    env.reset(goals[0])
    obs, _, _ = env.step(query(("jacket",)))
    obs, _, _ = env.step(obs.actions[0])
    obs, _, _ = env.step(click("Reviews"))
    actions = obs.actions
    assert actions == (BACK_TO_SEARCH, PREV)
    cfg = PPOConfig(transitions_per_update=16, n_envs=16, learning_rate=3e-3)
    for seed in range(5):
        model = PolicyModel.initialize(vocab, seed, hidden=16)
        ctx = model.encode(goals[0].goal_text, None, obs)
        rng = np.random.default_rng(seed)
        state = AdamState()
        for _ in range(200):
            scored, values = score_contexts(model, [ctx], [actions])
            probs = scored[0].probs
            streams = []
            for _ in range(16):
                i = int(rng.random() >= probs[0])
                streams.append([Transition(ctx, i, actions, scored[0].policy_logprob(i),
                                           float(values[0]), float(i == 0), True)])
            buf = RolloutBuffer(streams, [0.0] * 16)
            model, _, state = ppo_update(model, buf, cfg, rng, state)
        final = score_contexts(model, [ctx], [actions])[0][0].probs[0]
        assert final > 0.9, (seed, final)


def test_stats_csv(tmp_path):
    path = tmp_path / "s.csv"
    row = {k: i for i, k in enumerate(STATS_COLUMNS)}
    append_stats_row(path, row)
    append_stats_row(path, row)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 2 and tuple(rows[0]) == STATS_COLUMNS
