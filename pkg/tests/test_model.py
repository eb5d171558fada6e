from __future__ import annotations

import math

import numpy as np
import pytest

from gradcheck import finite_difference_check, loss_builders
from shopagent.autograd import Tensor, no_grad
from shopagent.bc import bc_objective
from shopagent.environment import ShopEnv, query
from shopagent.errors import ContractViolation
from shopagent.model import (
    LM_HEAD,
    VALUE_HEAD,
    LossRecord,
    PolicyModel,
    backward,
    checkpoint_bytes,
    encode_context,
    estimate_value,
    load_checkpoint,
    model_from_bytes,
    save_checkpoint,
    token_logprobs,
)
from shopagent.tokenizer import EOS_ID, SEP_ID, Vocabulary, tokenize


def _zeroed(model, names, value=0.0):
    params = dict(model.params)
    for n in names:
        params[n] = np.full_like(params[n], value)
    return model.with_params(params)


@pytest.fixture(scope="module")
def contexts(model, demos):
    out = []
    for d in demos[:4]:
        prev = None
        for obs, _ in d.steps:
            out.append(model.encode(d.instruction.goal_text, prev, obs))
            prev = obs
    return out


def test_tokenizer_and_vocabulary(tmp_path):
    assert tokenize("Price: $24.99, Red-ish!") == ("price", "24.99", "red", "ish")
    v = Vocabulary.build([("b", "a"), ("c", "a")])
    assert v.tokens[:4] == ("<pad>", "<unk>", "<eos>", "<sep>")
    assert [v.lookup(t) for t in v.tokens] == list(range(len(v)))
    assert v.lookup("zzz") == 1
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == v


def test_encode_context_layout(model, goals, catalog):
    env = ShopEnv(catalog)
    o1 = env.reset(goals[0])
    o2, _, _ = env.step(query(("shirt",)))
    first = model.encode(goals[0].goal_text, None, o1)
    goal_ids = model.vocab.encode(goals[0].goal_text)
    assert list(first.token_ids) == goal_ids + [SEP_ID] + model.vocab.encode(o1.text)
    both = model.encode(goals[0].goal_text, o1, o2)
    assert both.token_ids.count(SEP_ID) == 2
    assert both == model.encode(goals[0].goal_text, o1, o2)


def test_encode_context_truncation_keeps_goal(model, goals, catalog):
    env = ShopEnv(catalog)
    o1 = env.reset(goals[0])
    o2, _, _ = env.step(query(("shirt",)))
    goal = goals[0].goal_text
    enc = encode_context(model.vocab, goal, o1, o2, limit=len(goal) + 6)
    assert enc.length == len(goal) + 6
    assert list(enc.token_ids[:len(goal)]) == model.vocab.encode(goal)
    with pytest.raises(ContractViolation):
        encode_context(model.vocab, goal, None, o1, limit=8)


def test_token_logprobs_normalized(model, contexts):
    for c in contexts:
        for prefix in ([], [5], [5, 9, 12]):
            lp = token_logprobs(model, c, prefix)
            assert abs(np.exp(lp).sum() - 1.0) < 1e-9
    with pytest.raises(ContractViolation):
        token_logprobs(model, contexts[0], [model.n_vocab])


def test_zero_lm_head_is_uniform(model, contexts):
    flat = _zeroed(model, LM_HEAD)
    lp = token_logprobs(flat, contexts[0], [7, 8])
    assert np.allclose(lp, -math.log(model.n_vocab), atol=1e-12)


def test_head_weight_perturbation_changes_output(model, contexts):
    params = dict(model.params)
    w = params["lm_w"].copy()
    w[0, 10] += 0.5
    params["lm_w"] = w
    assert not np.allclose(token_logprobs(model, contexts[0], []),
                           token_logprobs(model.with_params(params), contexts[0], []))


def test_value_head_affine_zero_case(model, contexts):
    m = _zeroed(model, ("value_w1", "value_b1", "value_w2"))
    m = _zeroed(m, ("value_b2",), 0.375)
    assert all(estimate_value(m, c) == pytest.approx(0.375, abs=1e-7) for c in contexts)
    assert estimate_value(model, contexts[0]) == estimate_value(model, contexts[0])


def test_value_perturbation_leaves_token_distribution(model, contexts):
    params = dict(model.params)
    params["value_w2"] = params["value_w2"] + 0.3
    other = model.with_params(params)
    assert estimate_value(other, contexts[0]) != estimate_value(model, contexts[0])
    assert np.array_equal(token_logprobs(other, contexts[0], [4]),
                          token_logprobs(model, contexts[0], [4]))


def test_head_separation(model64, demos):
    P = model64.tensors(track=True)
    g = backward(model64, bc_objective(model64, demos[:3], P=P))
    assert all(not g[n].any() for n in VALUE_HEAD)
    value_loss = loss_builders(model64, demos[:3])["value"]
    P = model64.tensors(track=True)
    g = backward(model64, LossRecord(value_loss(P), P))
    assert all(not g[n].any() for n in LM_HEAD)


def test_backward_contract(model):
    P = model.tensors(track=True)
    const = Tensor(np.array(3.0))
    with pytest.raises(ContractViolation):
        backward(model, LossRecord(const, P))
    frozen = (P["lm_b"] * 0.0).sum()
    g = backward(model, LossRecord(frozen, P))
    assert all(not v.any() for v in g.values())


def test_backward_linearity(model64, demos):
    fns = loss_builders(model64, demos[:2])

    def grads(f):
        P = model64.tensors(track=True)
        return backward(model64, LossRecord(f(P), P))

    a, b = grads(fns["value"]), grads(fns["entropy"])
    both = grads(lambda P: fns["value"](P) + fns["entropy"](P))
    for k in both:
        assert np.allclose(both[k], a[k] + b[k], rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("which", ["bc", "policy", "value", "entropy"])
def test_gradients_match_finite_differences(model64, demos, which):
    worst, n = finite_difference_check(model64, loss_builders(model64, demos[:3])[which],
                                       n_coords=100)
    assert n == 100
    assert worst < 1e-3


def test_no_grad_disables_tracking(model):
    with no_grad():
        P = model.tensors(track=True)
        out = (P["lm_b"] * 2.0).sum()
    assert not out.requires_grad


def test_checkpoint_round_trip(tmp_path, model, contexts):
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", model.vocab)
    assert back.same_params(model)
    assert checkpoint_bytes(back) == checkpoint_bytes(model)
    assert np.array_equal(token_logprobs(back, contexts[1], [EOS_ID]),
                          token_logprobs(model, contexts[1], [EOS_ID]))


def test_checkpoint_rejects_mismatch(model):
    blob = checkpoint_bytes(model)
    with pytest.raises(ValueError):
        model_from_bytes(blob, Vocabulary(["just", "a", "few"]))
    with pytest.raises(ValueError):
        model_from_bytes(b"garbage" + blob[7:], model.vocab)


def test_initialization_is_seeded_and_bounded(vocab):
    a = PolicyModel.initialize(vocab, 3, hidden=8)
    b = PolicyModel.initialize(vocab, 3, hidden=8)
    assert a.same_params(b)
    assert a.parameter_count() == b.parameter_count()
    assert all(np.abs(v).max() <= 0.08 for v in a.params.values())
    assert a.dtype == np.float32


def test_no_grad_is_per_thread(model):
    import threading
    from shopagent.autograd import grad_enabled
    inside, release = threading.Event(), threading.Event()

    def worker():
        with no_grad():
            inside.set()
            release.wait(5)

    t = threading.Thread(target=worker)
    t.start()
    inside.wait(5)
    try:
        assert grad_enabled()
        assert model.tensors(track=True)["lm_b"].requires_grad
    finally:
        release.set()
        t.join()
    assert grad_enabled()
