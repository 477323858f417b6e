"""Coverage-style word attention.

Each reasoning step scores the words of the expression against the pooled
visual state; a history vector records how much attention every word has
already received so that later steps are pushed toward unread words::

    h_n = 1 - min(sum_{i<t} w_n^i, 1)
    w   = softmax_n( W1 tanh(W0 [h_n (vbar . e_n)] e_n + b0) + b1 )

where ``vbar`` is the spatial mean of the previous visual features. PAD
positions are excluded from the softmax. Parameters are shared across steps.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

from .encoders import ImageFeatureMap, WordFeatureMatrix
from .layers import masked_softmax


def history_vector(weight_history: Sequence[torch.Tensor], n: int | None = None) -> torch.Tensor:
    """``1 - min(sum of past weights, 1)``; all ones before the first step."""
    if not weight_history:
        if n is None:
            raise ValueError("need n to build the history of an empty sequence")
        return torch.ones(n)
    shape = weight_history[0].shape
    for w in weight_history:
        if w.shape != shape:
            raise ValueError(f"weight vectors differ in shape: {tuple(w.shape)} vs {tuple(shape)}")
    total = torch.stack(list(weight_history)).sum(dim=0)
    return 1.0 - torch.clamp(total, max=1.0)


class WordAttention(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.W0 = nn.Linear(dim, hidden)
        self.W1 = nn.Linear(hidden, 1)

    def logits(self, words: WordFeatureMatrix, visual: ImageFeatureMap, history: torch.Tensor):
        e = words.data
        vbar = visual.pooled()
        if vbar.shape[-1] != e.shape[-1]:
            raise ValueError(f"visual dim {vbar.shape[-1]} != word dim {e.shape[-1]}")
        if history.shape != e.shape[:2]:
            raise ValueError(f"history shape {tuple(history.shape)} != {tuple(e.shape[:2])}")
        relevance = torch.einsum("bnd,bd->bn", e, vbar)
        gated = (history * relevance).unsqueeze(-1) * e
        return self.W1(torch.tanh(self.W0(gated))).squeeze(-1)

    def forward(self, words: WordFeatureMatrix, visual: ImageFeatureMap,
                history: torch.Tensor) -> torch.Tensor:
        return masked_softmax(self.logits(words, visual, history), words.mask)


def attention_scores(words: WordFeatureMatrix, visual: ImageFeatureMap,
                     history: torch.Tensor, params: WordAttention) -> torch.Tensor:
    return params(words, visual, history)


def weight_words(words: WordFeatureMatrix, weights: torch.Tensor) -> torch.Tensor:
    if weights.shape != words.data.shape[:-1]:
        raise ValueError(f"weights shape {tuple(weights.shape)} != {tuple(words.data.shape[:-1])}")
    return words.data * weights.unsqueeze(-1)
