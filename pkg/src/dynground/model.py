"""The full grounding network: encoders, reasoning loop, box head and policy."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn

from .attention_history import WordAttention, history_vector, weight_words
from .dynamic_reward import PolicyHead, relevancy_score
from .encoders import EncoderConfig, ExpressionEncoder, ImageEncoder, WordFeatureMatrix
from .fusion import FusionConfig, FusionStep, ReasoningTrace, always_continue, run_reasoning
from .grounding_head import AnchorSet, GroundingHead, decode_tensor, iou_tensor


@dataclass
class ModelConfig:
    dim: int = 64
    spatial_side: int = 8
    image_px: int = 64
    n_layers: int = 2
    n_heads: int = 4
    feedforward_dim: int = 128
    n_anchors: int = 3

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(channel_dim=self.dim, word_dim=self.dim,
                             spatial_side=self.spatial_side, image_px=self.image_px)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.n_layers, self.n_heads, self.dim, self.feedforward_dim,
                            self.spatial_side)

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_ANCHORS = AnchorSet()


class DynamicGroundingNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None, anchors: AnchorSet = DEFAULT_ANCHORS):
        super().__init__()
        self.config = config = config or ModelConfig()
        if len(anchors) != config.n_anchors:
            raise ValueError("anchor count does not match config")
        self.anchors = anchors
        enc = config.encoder_config()
        self.image_encoder = ImageEncoder(enc)
        self.expr_encoder = ExpressionEncoder(enc)
        self.attention = WordAttention(config.dim)
        self.fusion = FusionStep(config.fusion_config())
        self.head = GroundingHead(config.dim, config.n_anchors)
        self.policy = PolicyHead(config.dim)

    def encode(self, images, tokens):
        return self.image_encoder(images), self.expr_encoder(tokens)

    def boxes(self, visual) -> torch.Tensor:
        return decode_tensor(self.head(visual).offsets, self.anchors, self.config.image_px)

    def rollout(self, images, tokens, steps: int, detach_policy_input: bool = False) -> dict:
        """Run exactly ``steps`` reasoning steps keeping every intermediate.

        Returns per-step stacks (leading dim T): ``offsets`` (T,B,S,S,A,5),
        ``pooled`` visual (T,B,C), ``probs`` (T,B,2), ``scores`` (T,B),
        ``weights`` (T,B,N).
        """
        visual, words = self.encode(images, tokens)
        cls = words.cls_vector
        weights, offsets, pooled, scores = [], [], [], []
        history = torch.ones_like(words.mask, dtype=words.data.dtype)
        for t in range(1, steps + 1):
            w = self.attention(words, visual, history)
            visual = self.fusion(weight_words(words, w), visual, words.mask, t).visual
            offsets.append(self.head(visual).offsets)
            pooled.append(visual.pooled())
            scores.append(relevancy_score(w, words, visual))
            weights.append(w)
            history = history_vector(weights)
        pooled = torch.stack(pooled)
        if detach_policy_input:
            pooled, cls = pooled.detach(), cls.detach()
        return {
            "offsets": torch.stack(offsets),
            "pooled": pooled,
            "cls": cls,
            "probs": self.policy.from_pooled(pooled, cls.expand_as(pooled)),
            "scores": torch.stack(scores),
            "weights": torch.stack(weights),
            "words": words,
        }

    @torch.no_grad()
    def reason(self, images, tokens, mode: str | int = "dynamic", max_steps: int = 6,
               gt_boxes: Optional[torch.Tensor] = None) -> ReasoningTrace:
        """Inference. ``mode`` is ``"dynamic"`` (policy decides) or an int k (fixed k steps)."""
        visual, words = self.encode(images, tokens)
        if mode == "dynamic":
            cls = words.cls_vector

            def controller(state, words_, w):
                d = self.policy(state.visual, cls)
                return d.probs, d.action

            steps = max_steps
        else:
            controller, steps = always_continue, int(mode)
        trace = run_reasoning(words, visual, controller, steps,
                              attention=self.attention, fusion=self.fusion)
        trace.step_boxes = [self.boxes(v) for v in trace.visuals]
        trace.final_box = self.boxes(trace.final_visual)
        if gt_boxes is not None:
            trace.final_iou = iou_tensor(trace.final_box, gt_boxes.to(trace.final_box.dtype))
        return trace
