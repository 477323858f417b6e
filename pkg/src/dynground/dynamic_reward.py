"""Stop/continue policy, the two reward signals and the discounted step weights.

Action 0 stops reasoning, action 1 continues. A step's total reward is the sum
of the ultimate reward (IoU >= 0.5 against ground truth) and the immediate
reward (word/visual relevancy did not decrease); reasoning is labelled
"continue" only when both are +1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import ImageFeatureMap, WordFeatureMatrix

STOP, CONTINUE = 0, 1
GAMMA = 0.9


@dataclass
class PolicyDecision:
    probs: torch.Tensor   # (B, 2)
    action: torch.Tensor  # (B,) long


@dataclass
class RewardRecord:
    step: int
    r_ultimate: int
    r_immediate: int
    score: float
    r_total: int = 0
    gate_continue: bool = False

    def __post_init__(self):
        self.r_total = self.r_ultimate + self.r_immediate
        self.gate_continue = gate(self.r_ultimate, self.r_immediate)


@dataclass
class StepWeights:
    weights: torch.Tensor
    gamma: float = GAMMA


class PolicyHead(nn.Module):
    """softmax(W2 tanh(W1 [pooled visual : cls] + b1) + b2)."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.W1p = nn.Linear(2 * dim, hidden)
        self.W2p = nn.Linear(hidden, 2)

    def logits(self, visual: ImageFeatureMap, cls_vector: torch.Tensor) -> torch.Tensor:
        return self._logits(visual.pooled(), cls_vector)

    def _logits(self, pooled, cls_vector):
        if pooled.shape != cls_vector.shape:
            raise ValueError(f"pooled visual {tuple(pooled.shape)} vs cls {tuple(cls_vector.shape)}")
        return self.W2p(torch.tanh(self.W1p(torch.cat([pooled, cls_vector], dim=-1))))

    def from_pooled(self, pooled: torch.Tensor, cls_vector: torch.Tensor) -> torch.Tensor:
        """Action probabilities from already pooled visual features."""
        return F.softmax(self._logits(pooled, cls_vector), dim=-1)

    def log_probs_from_pooled(self, pooled: torch.Tensor, cls_vector: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self._logits(pooled, cls_vector), dim=-1)

    def forward(self, visual: ImageFeatureMap, cls_vector: torch.Tensor) -> PolicyDecision:
        probs = F.softmax(self.logits(visual, cls_vector), dim=-1)
        return PolicyDecision(probs, select_action(probs))


def select_action(probs: torch.Tensor) -> torch.Tensor:
    """Argmax over (stop, continue); exact ties stop."""
    return (probs[..., CONTINUE] > probs[..., STOP]).long()


def decide(visual: ImageFeatureMap, cls_vector: torch.Tensor, params: PolicyHead) -> PolicyDecision:
    return params(visual, cls_vector)


def ultimate_reward(iou_value: float) -> int:
    if not 0.0 <= iou_value <= 1.0:
        raise ValueError(f"IoU {iou_value} outside [0, 1]")
    return 1 if iou_value >= 0.5 else -1


def relevancy_score(weights: torch.Tensor, words: WordFeatureMatrix,
                    visual: ImageFeatureMap) -> torch.Tensor:
    """``(sum_n w_n e_n) . mean(V)``, one value per batch element."""
    attended = torch.einsum("bn,bnd->bd", weights, words.data)
    return (attended * visual.pooled()).sum(dim=-1)


def immediate_reward(weights: torch.Tensor, words: WordFeatureMatrix, visual: ImageFeatureMap,
                     prev_score: float) -> tuple[int, float]:
    """Reward for a single instance; pass ``-inf`` as ``prev_score`` on the first step."""
    if weights.dim() == 1:
        weights = weights[None]
    score = float(relevancy_score(weights, words, visual)[0])
    return (1 if score - prev_score >= 0 else -1), score


def immediate_rewards(scores: torch.Tensor) -> torch.Tensor:
    """Batched immediate rewards from a (T, B) score table; step 1 is always +1."""
    prev = torch.cat([torch.full_like(scores[:1], float("-inf")), scores[:-1]])
    return torch.where(scores - prev >= 0, 1, -1).to(torch.long)


def gate(r_ultimate: int, r_immediate: int) -> bool:
    for r in (r_ultimate, r_immediate):
        if r not in (-1, 1):
            raise ValueError(f"reward must be +-1, got {r}")
    return r_ultimate + r_immediate > 0


def step_weights(rewards: Sequence[float] | torch.Tensor, gamma: float = GAMMA) -> StepWeights:
    """``weight[i] = sum_{t >= i} gamma^(t-i) r[t]``; works along dim 0 for tensors."""
    r = torch.as_tensor(rewards, dtype=torch.float64) if not torch.is_tensor(rewards) else rewards
    if r.shape[0] == 0:
        raise ValueError("rewards must be non-empty")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    out = torch.empty_like(r, dtype=torch.promote_types(r.dtype, torch.float32))
    running = torch.zeros_like(out[0])
    for t in range(r.shape[0] - 1, -1, -1):
        running = r[t] + gamma * running
        out[t] = running
    return StepWeights(out, gamma)


def policy_loss(probs: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | StepWeights,
                step_mask: torch.Tensor | None = None, log_probs: torch.Tensor | None = None
                ) -> torch.Tensor:
    """Weighted cross-entropy ``sum_t weight[t] * CE(probs[t], label[t])``.

    ``probs`` is (T, ..., 2) with ``labels``/``weights`` (T, ...); extra leading
    batch dims are summed too. Weights may be negative, which pushes the policy
    away from the label.

    Pass ``log_probs`` (a log-softmax of the same logits) when available: taking
    the log of saturated probabilities loses the gradient entirely.
    """
    if isinstance(weights, StepWeights):
        weights = weights.weights
    if probs.shape[:-1] != labels.shape or labels.shape != weights.shape:
        raise ValueError(f"length mismatch: probs {tuple(probs.shape)}, labels "
                         f"{tuple(labels.shape)}, weights {tuple(weights.shape)}")
    logp = torch.log(probs.clamp(min=1e-12)) if log_probs is None else log_probs
    ce = -logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    terms = weights.to(ce.dtype) * ce
    if step_mask is not None:
        terms = terms * step_mask
    return terms.sum()
