import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dynground import dynamic_reward as dr
from dynground.encoders import ImageFeatureMap, WordFeatureMatrix
from gradcheck import relative_error
from oracles import decide_oracle, step_weights_oracle


def test_probs_sum_to_one_and_zero_params_tie():
    head = dr.PolicyHead(8).double()
    for p in head.parameters():
        torch.nn.init.zeros_(p)
    v = ImageFeatureMap(torch.randn(3, 2, 2, 8, dtype=torch.float64))
    d = dr.decide(v, torch.randn(3, 8, dtype=torch.float64), head)
    assert torch.allclose(d.probs, torch.full((3, 2), 0.5, dtype=torch.float64))
    assert torch.all(d.action == dr.STOP)


def test_decide_matches_oracle():
    torch.manual_seed(0)
    head = dr.PolicyHead(8, hidden=6).double()
    for _ in range(30):
        v = torch.randn(1, 2, 2, 8, dtype=torch.float64)
        cls = torch.randn(1, 8, dtype=torch.float64)
        d = head(ImageFeatureMap(v), cls)
        p, a = decide_oracle(v[0].numpy(), cls[0].numpy(),
                             *(t.detach().numpy() for t in (head.W1p.weight, head.W1p.bias,
                                                            head.W2p.weight, head.W2p.bias)))
        np.testing.assert_allclose(d.probs[0].detach().numpy(), p, atol=1e-6)
        assert d.action.item() == a


def test_argmax_invariant_to_common_logit_shift():
    torch.manual_seed(1)
    head = dr.PolicyHead(8).double()
    v = ImageFeatureMap(torch.randn(5, 2, 2, 8, dtype=torch.float64))
    cls = torch.randn(5, 8, dtype=torch.float64)
    before = head(v, cls).action
    with torch.no_grad():
        head.W2p.bias += 3.7
    assert torch.equal(head(v, cls).action, before)


@pytest.mark.parametrize("iou,expected", [(0.6, 1), (0.5, 1), (0.49, -1), (0.0, -1), (1.0, 1)])
def test_ultimate_reward(iou, expected):
    assert dr.ultimate_reward(iou) == expected


def _score_setup(score):
    # one word with weight 1, e = (score, 0), visual mean = (1, 0)
    w = torch.tensor([[1.0]], dtype=torch.float64)
    words = WordFeatureMatrix(torch.tensor([[[score, 0.0]]], dtype=torch.float64),
                              torch.ones(1, 1, dtype=torch.bool))
    visual = ImageFeatureMap(torch.tensor([[[[1.0, 0.0]]]], dtype=torch.float64))
    return w, words, visual


@pytest.mark.parametrize("score,prev,expected", [(1.2, 1.0, 1), (1.0, 1.0, 1), (0.8, 1.0, -1),
                                                 (-5.0, -math.inf, 1)])
def test_immediate_reward(score, prev, expected):
    r, s = dr.immediate_reward(*_score_setup(score), prev_score=prev)
    assert r == expected and s == pytest.approx(score)


def test_immediate_rewards_batched_first_step_positive():
    scores = torch.tensor([[0.3, -2.0], [0.1, -1.0], [0.1, -1.5]])
    assert dr.immediate_rewards(scores).tolist() == [[1, 1], [-1, 1], [1, -1]]


@pytest.mark.parametrize("ru,ri,expected", [(1, 1, True), (1, -1, False), (-1, 1, False),
                                            (-1, -1, False)])
def test_gate_truth_table(ru, ri, expected):
    assert dr.gate(ru, ri) is expected
    rec = dr.RewardRecord(1, ru, ri, 0.0)
    assert rec.r_total == ru + ri and rec.gate_continue is expected


def test_gate_rejects_non_unit_rewards():
    with pytest.raises(ValueError):
        dr.gate(0, 1)


def test_step_weights_examples():
    assert dr.step_weights([2]).weights.tolist() == [2.0]
    w = dr.step_weights([2, 2, 2], 0.9).weights
    assert w[0].item() == pytest.approx(5.42, abs=1e-12)
    assert w.tolist() == pytest.approx(step_weights_oracle([2, 2, 2], 0.9))
    w = dr.step_weights([-2, 0, 2], 0.9).weights
    assert w.tolist() == pytest.approx(step_weights_oracle([-2, 0, 2], 0.9))
    assert w[-1].item() == 2


def test_step_weights_errors():
    with pytest.raises(ValueError):
        dr.step_weights([])
    with pytest.raises(ValueError):
        dr.step_weights([1.0], gamma=0.0)


@given(st.lists(st.sampled_from([-2, 0, 2]), min_size=1, max_size=12),
       st.lists(st.sampled_from([-2, 0, 2]), min_size=12, max_size=12))
@settings(max_examples=100, deadline=None)
def test_step_weights_tail_and_linearity(a, b):
    b = b[:len(a)]
    wa, wb = dr.step_weights(a).weights, dr.step_weights(b).weights
    wab = dr.step_weights([x + y for x, y in zip(a, b)]).weights
    assert wa[-1].item() == a[-1]
    assert torch.allclose(wab, wa + wb, atol=1e-12)


def test_policy_loss_perfect_and_uniform():
    labels = torch.tensor([1, 0])
    onehot = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    assert dr.policy_loss(onehot, labels, torch.ones(2)).item() == 0.0
    uniform = torch.full((2, 2), 0.5, dtype=torch.float64)
    assert dr.policy_loss(uniform, labels, torch.ones(2)).item() == pytest.approx(2 * math.log(2))


def test_policy_loss_length_mismatch():
    with pytest.raises(ValueError):
        dr.policy_loss(torch.full((2, 2), 0.5), torch.tensor([1, 0]), torch.ones(3))


def test_policy_loss_gradient_two_step_trace():
    torch.manual_seed(2)
    head = dr.PolicyHead(8).double()
    visuals = [ImageFeatureMap(torch.randn(1, 2, 2, 8, dtype=torch.float64)) for _ in range(2)]
    cls = torch.randn(1, 8, dtype=torch.float64)
    labels = torch.tensor([[1], [0]])
    weights = dr.step_weights([2.0, -2.0]).weights[:, None]

    def loss():
        probs = torch.stack([head(v, cls).probs for v in visuals])
        return dr.policy_loss(probs, labels, weights)

    assert relative_error(loss, list(head.parameters())) < 1e-4


def test_monotone_immediate_reward():
    rng = np.random.default_rng(0)
    for _ in range(50):
        e = torch.tensor(rng.normal(size=(1, 3, 4)))
        w = torch.softmax(torch.tensor(rng.normal(size=(1, 3))), -1)
        words = WordFeatureMatrix(e, torch.ones(1, 3, dtype=torch.bool))
        v = torch.tensor(rng.normal(size=(1, 2, 2, 4)))
        L = (w[0, :, None] * e[0]).sum(0)
        prev = float(dr.relevancy_score(w, words, ImageFeatureMap(v))) - 0.1
        r0, _ = dr.immediate_reward(w[0], words, ImageFeatureMap(v), prev)
        r1, _ = dr.immediate_reward(w[0], words, ImageFeatureMap(v + 0.5 * L), prev)
        assert r0 == 1 and r1 == 1
