import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dynground.encoders import ImageFeatureMap
from dynground.grounding_head import (AnchorPrediction, AnchorSet, GroundingHead, assign_target,
                                      box_loss, decode, encode_gt, iou, iou_tensor, predict)
from dynground.synth_env import BoundingBox
from gradcheck import relative_error
from oracles import assign_oracle, iou_oracle, iou_raster_oracle

ANCHORS = AnchorSet()


def test_predict_shape_and_zero_weights():
    head = GroundingHead(64, 3)
    out = predict(ImageFeatureMap(torch.randn(2, 8, 8, 64)), head)
    assert out.offsets.shape == (2, 8, 8, 3, 5)
    for p in head.parameters():
        torch.nn.init.zeros_(p)
    assert torch.all(head(ImageFeatureMap(torch.randn(1, 8, 8, 64))).offsets == 0)


def test_predict_shape_mismatch():
    with pytest.raises(ValueError):
        GroundingHead(64)(ImageFeatureMap(torch.randn(1, 8, 8, 32)))


def test_head_gradient():
    torch.manual_seed(0)
    head = GroundingHead(8, 3, hidden=6).double()
    v = ImageFeatureMap(torch.randn(2, 2, 2, 8, dtype=torch.float64))
    tidx = torch.tensor([3, 7])
    toff = torch.randn(2, 4, dtype=torch.float64)
    loss = lambda: box_loss(head(v).offsets, tidx, toff).sum()
    assert relative_error(loss, list(head.parameters())) < 1e-4


def test_decode_zero_offsets_uniform_conf():
    box = decode(AnchorPrediction(torch.zeros(8, 8, 3, 5)), ANCHORS, 64)
    # first placement: cell (0, 0), anchor 0 (4x4), centred at (4, 4)
    assert box == BoundingBox(2.0, 2.0, 6.0, 6.0)


def test_decode_log2_doubles_width():
    off = torch.zeros(8, 8, 3, 5)
    off[3, 4, 1, 4] = 5.0
    off[3, 4, 1, 2] = math.log(2)
    box = decode(AnchorPrediction(off), ANCHORS, 64)
    assert box.width == pytest.approx(12.0) and box.height == pytest.approx(6.0)
    assert box.center == pytest.approx((36.0, 28.0))


def test_decode_encode_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(200):
        w, h = rng.uniform(3, 9, size=2)
        cx, cy = rng.uniform(8, 56, size=2)
        gt = BoundingBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        (r, c), a, t = encode_gt(gt, ANCHORS)
        off = torch.zeros(8, 8, 3, 5, dtype=torch.float64)
        off[r, c, a, :4] = torch.from_numpy(t)
        off[r, c, a, 4] = 1.0
        back = decode(AnchorPrediction(off), ANCHORS, 64)
        assert np.allclose(back.as_list(), gt.as_list(), atol=1e-6)


def test_iou_examples():
    a = BoundingBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(20, 20, 30, 30)) == 0.0
    b = BoundingBox(5, 5, 15, 15)
    assert iou(a, b) == pytest.approx(25 / 175)
    assert iou_raster_oracle(a.as_list(), b.as_list()) == pytest.approx(25 / 175)


boxes = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0.5, 14), st.floats(0.5, 14)).map(
    lambda t: BoundingBox(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(boxes, boxes)
@settings(max_examples=200, deadline=None)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a))
    assert v == pytest.approx(iou_oracle(a.as_list(), b.as_list()))
    t = iou_tensor(torch.tensor([a.as_list()], dtype=torch.float64),
                   torch.tensor([b.as_list()], dtype=torch.float64))
    assert t.item() == pytest.approx(v, abs=1e-12)


def test_iou_decreases_under_translation():
    fixed = BoundingBox(10, 10, 20, 20)
    prev = 1.0
    for dx in np.arange(0.5, 10.0, 0.5):
        v = iou(fixed, BoundingBox(10 + dx, 10, 20 + dx, 20))
        assert v < prev
        prev = v
    assert iou(fixed, BoundingBox(20, 10, 30, 20)) == 0.0


def test_assign_exact_anchor():
    # anchor 1 (6x6) placed at cell (2, 5): centre (44, 20)
    gt = BoundingBox(41, 17, 47, 23)
    assert assign_target(gt, ANCHORS) == ((2, 5), 1)


def test_assign_tie_breaks_lexicographically():
    anchors = AnchorSet(((4.0, 4.0), (4.0, 4.0), (8.0, 8.0)))
    assert assign_target(BoundingBox(2, 2, 6, 6), anchors) == ((0, 0), 0)
    # box straddling two cells horizontally: equal IoU with (0,0) and (0,1)
    assert assign_target(BoundingBox(6, 2, 10, 6), ANCHORS)[0] == (0, 0)


def test_assign_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        w, h = rng.uniform(2, 12, size=2)
        x, y = rng.uniform(0, 64 - w), rng.uniform(0, 64 - h)
        gt = BoundingBox(x, y, x + w, y + h)
        assert assign_target(gt, ANCHORS) == assign_oracle(gt.as_list(), ANCHORS.anchors, 8, 64)


def test_box_loss_prefers_target():
    off = torch.zeros(1, 8, 8, 3, 5)
    tidx = torch.tensor([17])
    base = box_loss(off, tidx, torch.zeros(1, 4))
    off.view(1, -1, 5)[0, 17, 4] = 5.0
    assert box_loss(off, tidx, torch.zeros(1, 4)) < base
