"""One reasoning step of language-conditioned visual refinement, and the loop.

A step feeds ``[weighted words ; flattened visual tokens]`` through a
transformer encoder, keeps the visual segment of the output, concatenates it
channel-wise with the step's input visual tokens and projects the 2C-wide
result back to C with a 1x1 conv + norm + relu.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
import torch.nn as nn

from .attention_history import WordAttention, history_vector, weight_words
from .encoders import ImageFeatureMap, WordFeatureMatrix
from .layers import TransformerLayer


@dataclass
class FusionConfig:
    n_layers: int = 2
    n_heads: int = 4
    model_dim: int = 64
    feedforward_dim: int = 128
    spatial_side: int = 8
    norm_groups: int = 8

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")


@dataclass
class FusedState:
    visual: ImageFeatureMap
    flat_visual: torch.Tensor  # (B, S*S, C)
    step: int


class FusionStep(nn.Module):
    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        c, s = config.model_dim, config.spatial_side
        self.visual_pos = nn.Parameter(torch.randn(s * s, c) * 0.1)
        self.layers = nn.ModuleList(
            TransformerLayer(c, config.n_heads, config.feedforward_dim)
            for _ in range(config.n_layers))
        self.project = nn.Linear(2 * c, c)
        self.norm = nn.GroupNorm(min(config.norm_groups, c), c)

    def forward(self, weighted_words: torch.Tensor, prev_visual: ImageFeatureMap,
                word_mask: Optional[torch.Tensor] = None, step: int = 1) -> FusedState:
        b, s, s2, c = prev_visual.data.shape
        if weighted_words.shape[-1] != c or c != self.config.model_dim:
            raise ValueError(f"feature dims differ: words {weighted_words.shape[-1]}, "
                             f"visual {c}, model {self.config.model_dim}")
        n = weighted_words.shape[1]
        prev_flat = prev_visual.flat
        x = torch.cat([weighted_words, prev_flat + self.visual_pos], dim=1)
        key_mask = None
        if word_mask is not None:
            key_mask = torch.cat([word_mask, word_mask.new_ones(b, s * s2)], dim=1)
        for layer in self.layers:
            x = layer(x, key_mask)
        fused = torch.cat([x[:, n:], prev_flat], dim=-1)
        y = self.project(fused)
        # GroupNorm wants channels second
        y = torch.relu(self.norm(y.transpose(1, 2)).transpose(1, 2))
        return FusedState(ImageFeatureMap(y.reshape(b, s, s2, c)), y, step)


def fuse_step(weighted_words, prev_visual, params: FusionStep, word_mask=None, step=1) -> FusedState:
    return params(weighted_words, prev_visual, word_mask, step)


# controller(state, words, weights) -> (probs or None, action); action 1 = continue
Controller = Callable[[FusedState, WordFeatureMatrix, torch.Tensor],
                      tuple[Optional[torch.Tensor], torch.Tensor]]


@dataclass
class ReasoningTrace:
    """Per-step record of one (batched) reasoning run.

    Lists are indexed by step; entries for elements that already stopped are
    carried along but flagged False in ``active``.
    """

    weights: list = field(default_factory=list)      # (B, N) per step
    histories: list = field(default_factory=list)    # (B, N)
    visuals: list = field(default_factory=list)      # ImageFeatureMap
    probs: list = field(default_factory=list)        # (B, 2) or None
    actions: list = field(default_factory=list)      # (B,) long
    active: list = field(default_factory=list)       # (B,) bool, element ran this step
    executed_steps: Optional[torch.Tensor] = None    # (B,) long
    final_visual: Optional[ImageFeatureMap] = None
    final_box: Optional[torch.Tensor] = None         # (B, 4)
    final_iou: Optional[torch.Tensor] = None         # (B,)
    step_boxes: list = field(default_factory=list)   # (B, 4) per step

    def __len__(self):
        return len(self.weights)


def run_reasoning(words: WordFeatureMatrix, initial_visual: ImageFeatureMap,
                  controller: Controller, max_steps: int, *,
                  attention: WordAttention, fusion: FusionStep) -> ReasoningTrace:
    """Attend, weight, fuse and ask ``controller`` whether to go on.

    Stops per element at the first stop action or after ``max_steps``.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    b, n = words.mask.shape
    trace = ReasoningTrace()
    visual = initial_visual
    final = initial_visual.data
    active = torch.ones(b, dtype=torch.bool)
    executed = torch.zeros(b, dtype=torch.long)
    history = torch.ones(b, n, dtype=words.data.dtype)
    for t in range(1, max_steps + 1):
        w = attention(words, visual, history)
        state = fusion(weight_words(words, w), visual, words.mask, t)
        probs, action = controller(state, words, w)
        trace.weights.append(w)
        trace.histories.append(history)
        trace.visuals.append(state.visual)
        trace.probs.append(probs)
        trace.actions.append(action)
        trace.active.append(active.clone())
        executed = executed + active.long()
        final = torch.where(active[:, None, None, None], state.visual.data, final)
        active = active & (action == 1)
        visual = state.visual
        history = history_vector(trace.weights)
        if not active.any():
            break
    trace.executed_steps = executed
    trace.final_visual = ImageFeatureMap(final)
    return trace


def always_continue(state, words, weights):
    return None, torch.ones(state.visual.data.shape[0], dtype=torch.long)


def always_stop(state, words, weights):
    return None, torch.zeros(state.visual.data.shape[0], dtype=torch.long)
