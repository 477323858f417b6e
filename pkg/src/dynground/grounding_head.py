"""Anchor-box prediction head, box decoding, IoU and target assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import ImageFeatureMap
from .synth_env import BoundingBox


@dataclass(frozen=True)
class AnchorSet:
    anchors: tuple[tuple[float, float], ...] = ((4.0, 4.0), (6.0, 6.0), (8.0, 8.0))

    def __post_init__(self):
        if any(w <= 0 or h <= 0 for w, h in self.anchors):
            raise ValueError("anchor dimensions must be positive")

    def __len__(self):
        return len(self.anchors)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.anchors, dtype=dtype)


@dataclass
class AnchorPrediction:
    offsets: torch.Tensor  # (B, S, S, A, 5): tx, ty, tw, th, conf logit


class GroundingHead(nn.Module):
    """Two 1x1 convolutions: C -> hidden -> A*5."""

    def __init__(self, channels: int, n_anchors: int = 3, hidden: int | None = None):
        super().__init__()
        hidden = hidden or channels
        self.n_anchors = n_anchors
        self.conv1 = nn.Conv2d(channels, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, n_anchors * 5, 1)

    def forward(self, visual: ImageFeatureMap) -> AnchorPrediction:
        x = visual.data
        if x.dim() != 4 or x.shape[-1] != self.conv1.in_channels:
            raise ValueError(f"expected (B, S, S, {self.conv1.in_channels}) features, got {tuple(x.shape)}")
        y = self.conv2(torch.relu(self.conv1(x.permute(0, 3, 1, 2))))
        b, _, s, s2 = y.shape
        return AnchorPrediction(y.permute(0, 2, 3, 1).reshape(b, s, s2, self.n_anchors, 5))


def predict(visual: ImageFeatureMap, params: GroundingHead) -> AnchorPrediction:
    return params(visual)


def decode_tensor(offsets: torch.Tensor, anchors: AnchorSet, image_px: int) -> torch.Tensor:
    """Boxes (B, 4) in pixels from the max-confidence placement of each element.

    Ties go to the first placement in (row, col, anchor) order.
    """
    b, s, _, a, _ = offsets.shape
    stride = image_px / s
    flat = offsets.reshape(b, -1, 5)
    best = flat[..., 4].argmax(dim=1)
    sel = flat[torch.arange(b), best]
    row = torch.div(best, s * a, rounding_mode="floor")
    col = torch.div(best, a, rounding_mode="floor") % s
    ai = best % a
    anc = anchors.tensor(offsets.dtype)[ai]
    cx = (col.to(offsets.dtype) + torch.sigmoid(sel[:, 0])) * stride
    cy = (row.to(offsets.dtype) + torch.sigmoid(sel[:, 1])) * stride
    w = anc[:, 0] * torch.exp(sel[:, 2])
    h = anc[:, 1] * torch.exp(sel[:, 3])
    boxes = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)
    return boxes.clamp(0.0, float(image_px))


def decode(pred: AnchorPrediction, anchors: AnchorSet, image_px: int) -> BoundingBox:
    offsets = pred.offsets
    if offsets.dim() == 4:
        offsets = offsets[None]
    box = decode_tensor(offsets.detach().double(), anchors, image_px)[0]
    return BoundingBox(*(float(v) for v in box))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.width * a.height + b.width * b.height - inter
    return inter / union


def iou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise IoU of (..., 4) xyxy boxes; zero-area unions give 0."""
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    area = lambda x: (x[..., 2] - x[..., 0]).clamp(min=0) * (x[..., 3] - x[..., 1]).clamp(min=0)
    union = area(a) + area(b) - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))


def anchor_boxes(anchors: AnchorSet, grid: int, image_px: int) -> np.ndarray:
    """(S, S, A, 4) anchors centred on every cell."""
    stride = image_px / grid
    c = (np.arange(grid) + 0.5) * stride
    cy, cx = np.meshgrid(c, c, indexing="ij")
    dims = np.asarray(anchors.anchors, dtype=np.float64)
    w, h = dims[:, 0], dims[:, 1]
    return np.stack([cx[..., None] - w / 2, cy[..., None] - h / 2,
                     cx[..., None] + w / 2, cy[..., None] + h / 2], axis=-1)


def assign_target(gt: BoundingBox, anchors: AnchorSet, grid: int = 8,
                  image_px: int = 64) -> tuple[tuple[int, int], int]:
    """The placement with highest IoU against ``gt``; ties resolve lexicographically."""
    boxes = anchor_boxes(anchors, grid, image_px)
    g = np.array(gt.as_list(), dtype=np.float64)
    iw = np.clip(np.minimum(boxes[..., 2], g[2]) - np.maximum(boxes[..., 0], g[0]), 0, None)
    ih = np.clip(np.minimum(boxes[..., 3], g[3]) - np.maximum(boxes[..., 1], g[1]), 0, None)
    inter = iw * ih
    union = ((boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])
             + gt.width * gt.height - inter)
    flat = int(np.argmax((inter / union).ravel()))  # first occurrence wins
    a = len(anchors)
    return (flat // (grid * a), (flat // a) % grid), flat % a


def encode_gt(gt: BoundingBox, anchors: AnchorSet, grid: int = 8, image_px: int = 64,
              eps: float = 1e-6) -> tuple[tuple[int, int], int, np.ndarray]:
    """Inverse of ``decode`` at the assigned placement: ``(cell, anchor, [tx, ty, tw, th])``."""
    (row, col), ai = assign_target(gt, anchors, grid, image_px)
    stride = image_px / grid
    cx, cy = gt.center
    fx = min(max(cx / stride - col, eps), 1 - eps)
    fy = min(max(cy / stride - row, eps), 1 - eps)
    aw, ah = anchors.anchors[ai]
    t = np.array([math.log(fx / (1 - fx)), math.log(fy / (1 - fy)),
                  math.log(gt.width / aw), math.log(gt.height / ah)])
    return (row, col), ai, t


def box_loss(offsets: torch.Tensor, target_index: torch.Tensor,
             target_offsets: torch.Tensor) -> torch.Tensor:
    """Per-element loss: softmax cross-entropy over all S*S*A confidences
    against the assigned placement, plus MSE of its four offsets.

    ``target_index`` is the flat (row, col, anchor) index, ``target_offsets`` (B, 4).
    """
    b = offsets.shape[0]
    flat = offsets.reshape(b, -1, 5)
    conf_loss = F.cross_entropy(flat[..., 4], target_index, reduction="none")
    reg = flat[torch.arange(b), target_index, :4]
    return conf_loss + ((reg - target_offsets) ** 2).mean(dim=-1)
