from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shopagent.environment import (
    BACK_TO_SEARCH,
    BUY_NOW,
    NEXT,
    PREV,
    QUERY_SLOT,
    SEARCH,
    ActionKind,
    ActionSpec,
    Catalog,
    GoalStream,
    Instruction,
    PageKind,
    Product,
    ShopEnv,
    click,
    compute_reward,
    generate_catalog,
    load_instructions,
    query,
    rank_products,
    sample_instruction,
    save_instructions,
)
from shopagent.errors import ContractViolation, IllegalActionError

ATTRS = [f"a{i}" for i in range(8)]
OPTS = {"color": ["red", "blue", "green"], "size": ["s", "m", "l", "xl"]}
WORDS = ["alpha", "beta", "gamma", "delta", "eps"]


def reference_reward(product, selected, ins):
    """Independent evaluation with exact rational arithmetic."""
    wanted = list(ins.target_type)
    if wanted:
        present = 0
        for tok in wanted:
            if tok in product.title:
                present += 1
        f = Fraction(present, len(wanted))
        r_type = Fraction(1) if f >= Fraction(3, 4) else Fraction(1, 2) if f >= Fraction(1, 2) \
            else Fraction(1, 10) if f > 0 else Fraction(0)
    else:
        r_type = Fraction(1)
    hits = 0
    for a in ins.required_attributes:
        if a in product.attributes:
            hits += 1
    for name, value in ins.required_options.items():
        if name in selected and selected[name] == value:
            hits += 1
    if product.price <= ins.price_cap:
        hits += 1
    total = len(ins.required_attributes) + len(ins.required_options) + 1
    return r_type * Fraction(hits, total)


def random_triple(rng):
    ptype = tuple(rng.choice(WORDS, size=int(rng.integers(1, 4)), replace=False))
    extra = tuple(rng.choice(["x", "y", "z"], size=int(rng.integers(0, 3)), replace=False))
    options = {k: tuple(rng.choice(v, size=int(rng.integers(1, len(v) + 1)), replace=False))
               for k, v in OPTS.items() if rng.random() < 0.7}
    product = Product(0, "c", extra + ptype, ptype,
                      frozenset(rng.choice(ATTRS, size=int(rng.integers(1, 5)), replace=False)),
                      options, round(float(rng.uniform(1, 100)), 2))
    selected = {k: v[int(rng.integers(len(v)))] for k, v in options.items() if rng.random() < 0.6}
    want_type = tuple(rng.choice(WORDS, size=int(rng.integers(1, 5)), replace=False))
    ins = Instruction(
        goal_text=("goal",),
        required_attributes=frozenset(rng.choice(ATTRS, size=int(rng.integers(1, 4)), replace=False)),
        required_options={k: str(rng.choice(v)) for k, v in OPTS.items() if rng.random() < 0.5},
        price_cap=float(rng.integers(1, 100)),
        target_type=want_type, source_category="c", target_id=0)
    return product, selected, ins


def test_reward_matches_reference_on_random_triples():
    rng = np.random.default_rng(2024)
    for _ in range(300):
        p, sel, ins = random_triple(rng)
        assert compute_reward(p, sel, ins) == float(reference_reward(p, sel, ins))


def _product(attrs=("a0", "a1"), options=None, price=10.0, title=("brand", "gamma")):
    return Product(1, "c", title, ("gamma",), frozenset(attrs),
                   options or {"color": ("red", "blue")}, price)


def _ins(attrs=("a0",), options=None, cap=20.0, ttype=("gamma",)):
    return Instruction(("g",), frozenset(attrs), options or {}, cap, ttype, "c", 1)


def test_reward_worked_examples():
    p = _product()
    assert compute_reward(p, {"color": "red"}, _ins(("a0", "a1"), {"color": "red"})) == 1.0
    # two attributes, one matched; one option, unmatched; price ok -> 2/4
    assert compute_reward(p, {"color": "blue"}, _ins(("a0", "a9"), {"color": "red"})) == 0.5
    assert compute_reward(p, {}, _ins(("a8", "a9"), {"color": "red"}, cap=5.0)) == 0.0


@pytest.mark.parametrize("ttype,expected", [
    (("gamma",), 1.0), (("gamma", "zeta"), 0.5), (("gamma", "zeta", "eta"), 0.1),
    (("zeta",), 0.0), (("brand", "gamma", "zeta", "eta"), 0.5)])
def test_type_match_levels(ttype, expected):
    assert compute_reward(_product(), {}, _ins(ttype=ttype)) == pytest.approx(expected)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_reward_bounds_and_monotonicity(seed):
    rng = np.random.default_rng(seed)
    p, sel, ins = random_triple(rng)
    r = compute_reward(p, sel, ins)
    assert 0.0 <= r <= 1.0
    missing = sorted(set(ins.required_attributes) - p.attributes)
    if missing:
        better = Product(p.id, p.category, p.title, p.product_type,
                         p.attributes | {missing[0]}, p.options, p.price)
        assert compute_reward(better, sel, ins) >= r


def test_catalog_is_deterministic_and_seed_sensitive():
    a, b, c = generate_catalog(1, 50, 5), generate_catalog(1, 50, 5), generate_catalog(2, 50, 5)
    assert a == b
    assert a != c


def test_catalog_structure(catalog):
    assert len(catalog) == 50 and len(catalog.categories) == 5
    for p in catalog.products:
        assert 1 <= len(p.options) <= 3
        assert all(2 <= len(v) <= 4 for v in p.options.values())
        assert set(p.product_type) <= set(p.title)
    for cat in catalog.categories:
        assert catalog.unique_attribute_fraction(cat) >= 0.85


def test_catalog_rejects_bad_sizes():
    with pytest.raises(ContractViolation):
        generate_catalog(1, 0, 1)
    with pytest.raises(ContractViolation):
        generate_catalog(1, 3, 5)


def test_catalog_and_instruction_files_round_trip(tmp_path, catalog):
    catalog.save(tmp_path / "c.jsonl")
    assert Catalog.load(tmp_path / "c.jsonl") == catalog
    goals = GoalStream(catalog, 4, "x").take(20)
    save_instructions(goals, tmp_path / "g.jsonl")
    assert load_instructions(tmp_path / "g.jsonl") == goals


def test_instruction_sampling(catalog):
    a = sample_instruction(catalog, np.random.default_rng(5))
    b = sample_instruction(catalog, np.random.default_rng(5))
    assert a == b
    rng = np.random.default_rng(0)
    samples = [sample_instruction(catalog, rng) for _ in range(1000)]
    for ins in samples:
        target = catalog.get(ins.target_id)
        assert ins.required_attributes <= target.attributes
        assert 1 <= len(ins.required_attributes) <= 3
        assert all(target.options[k] and v in target.options[k]
                   for k, v in ins.required_options.items())
    frac = np.mean([ins.price_cap >= catalog.get(ins.target_id).price for ins in samples])
    assert 0.85 <= frac <= 0.95


def test_goal_streams_are_disjoint_by_id(catalog):
    train = {g.goal_id for g in GoalStream(catalog, 0, "train").take(500)}
    ev = {g.goal_id for g in GoalStream(catalog, 0, "eval").take(500)}
    assert not train & ev


def test_reset_gives_search_page(catalog, goals):
    env = ShopEnv(catalog)
    obs = env.reset(goals[0])
    assert obs.page_kind is PageKind.SEARCH and env.state.step_count == 0
    assert set(goals[0].goal_text) <= set(obs.text)
    assert obs.actions == (QUERY_SLOT, SEARCH)
    assert sum(a.kind is ActionKind.SEARCH_QUERY for a in obs.actions) == 1


def reference_rank(catalog, q):
    scores = {p.id: sum(1 for t in q if t in p.title) + 2 * sum(1 for t in q if t in p.product_type)
              for p in catalog.products}
    return sorted(scores, key=lambda pid: (-scores[pid], pid))


def test_ranking_matches_brute_force(catalog):
    rng = np.random.default_rng(1)
    words = sorted({t for p in catalog.products for t in p.title})
    for _ in range(100):
        q = tuple(rng.choice(words, size=int(rng.integers(1, 5))))
        assert rank_products(catalog, q) == reference_rank(catalog, q)


def test_ranking_edge_cases(catalog):
    assert rank_products(catalog, ()) == []
    assert rank_products(catalog, ("nonexistentword",)) == sorted(p.id for p in catalog.products)
    twin = Catalog((Product(7, "c", ("x", "y"), ("y",), frozenset({"a"}), {"s": ("m",)}, 1.0),
                    Product(3, "c", ("x", "y"), ("y",), frozenset({"a"}), {"s": ("m",)}, 1.0)),
                   ("c",))
    assert rank_products(twin, ("x", "y")) == [3, 7]


def test_title_query_puts_target_in_top_five(catalog):
    env = ShopEnv(catalog)
    for p in catalog.products:
        env.reset(GoalStream(catalog, p.id, "t").take(1)[0])
        obs, r, done = env.step(query(p.title))
        assert obs.page_kind is PageKind.RESULTS
        assert ActionSpec(ActionKind.CLICK, p.title) in obs.actions[:5]


def _to_item(env, catalog, ins):
    target = catalog.get(ins.target_id)
    env.reset(ins)
    obs, _, _ = env.step(query(target.title))
    obs, _, _ = env.step(ActionSpec(ActionKind.CLICK, target.title))
    return target, obs


def test_full_match_purchase_gives_reward_one(catalog, goals):
    env = ShopEnv(catalog)
    ins = next(g for g in goals if g.price_cap >= catalog.get(g.target_id).price)
    target, obs = _to_item(env, catalog, ins)
    assert obs.page_kind is PageKind.ITEM
    assert obs.actions[:6] == (BACK_TO_SEARCH, PREV, click("Description"), click("Features"),
                               click("Reviews"), BUY_NOW)
    for name, value in ins.required_options.items():
        obs, r, done = env.step(click(value))
        assert (r, done) == (0.0, False)
        assert env.state.page.selected[name] == value
    obs, r, done = env.step(BUY_NOW)
    assert done and r == 1.0


def test_back_to_search_and_subpages(catalog, goals):
    env = ShopEnv(catalog)
    _, obs = _to_item(env, catalog, goals[0])
    obs, r, done = env.step(click("Features"))
    assert obs.page_kind is PageKind.ITEM_SUB and obs.actions == (BACK_TO_SEARCH, PREV)
    obs, _, _ = env.step(PREV)
    assert obs.page_kind is PageKind.ITEM
    obs, r, done = env.step(BACK_TO_SEARCH)
    assert obs.page_kind is PageKind.SEARCH and r == 0.0 and not done


def test_pagination(catalog, goals):
    env = ShopEnv(catalog)
    env.reset(goals[0])
    obs, _, _ = env.step(query(("nonexistentword",)))
    assert NEXT in obs.actions and PREV not in obs.actions
    obs, _, _ = env.step(NEXT)
    assert "2" in obs.text and PREV in obs.actions
    last = None
    for _ in range(20):
        if NEXT not in obs.actions:
            break
        last = obs
        obs, _, _ = env.step(NEXT)
    assert last is not None and NEXT not in obs.actions


def test_horizon_truncation(catalog, goals):
    env = ShopEnv(catalog, horizon=4)
    env.reset(goals[0])
    done = False
    rewards = []
    for a in (SEARCH, BACK_TO_SEARCH, SEARCH, BACK_TO_SEARCH):
        _, r, done = env.step(a)
        rewards.append(r)
    assert done and rewards == [0.0] * 4
    with pytest.raises(ContractViolation):
        env.step(SEARCH)


def _random_walk(catalog, goal, seed, horizon=30):
    rng = np.random.default_rng(seed)
    env = ShopEnv(catalog, horizon=horizon)
    obs = env.reset(goal)
    trail = []
    done = False
    while not done:
        a = obs.actions[int(rng.integers(len(obs.actions)))]
        if a == QUERY_SLOT:
            a = query(rng.choice(WORDS + ["red", "jacket"], size=2).tolist())
        trail.append((env.state, obs, a))
        obs, r, done = env.step(a)
        trail[-1] += (r, done, obs)
    return trail


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 39))
def test_legality_determinism_and_sparsity(catalog, goals, seed, gi):
    trail = _random_walk(catalog, goals[gi], seed)
    env = ShopEnv(catalog)
    for state, obs, a, r, done, nxt in trail:
        for b in obs.actions:
            env.state = state
            env.step(b if b != QUERY_SLOT else query(("x",)))
        for bad in (click("Buy Now"), click("Next >"), click("< Prev"), click("nonsense")):
            if bad not in obs.actions:
                env.state = state
                with pytest.raises(IllegalActionError):
                    env.step(bad)
                assert env.state == state
        env.state = state
        again, r2, d2 = env.step(a)
        assert (again, r2, d2) == (nxt, r, done)
        if r != 0.0:
            assert done and a == BUY_NOW
