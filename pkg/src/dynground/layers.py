"""Small transformer building blocks shared by the expression encoder and fusion."""

import torch
import torch.nn as nn
import torch.nn.functional as F


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, key_mask=None):
        """``key_mask``: (B, L) bool, True where a key may be attended to."""
        b, length, dim = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (t.view(b, length, self.n_heads, -1).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-1, -2) / (dim // self.n_heads) ** 0.5
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, length, dim)
        return self.out(y)


class TransformerLayer(nn.Module):
    """Post-norm encoder layer (attention, then feed-forward), no dropout."""

    def __init__(self, dim: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.attn = MultiHeadSelfAttention(dim, n_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.ReLU(), nn.Linear(ff_dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, key_mask=None):
        x = self.norm1(x + self.attn(x, key_mask))
        return self.norm2(x + self.ff(x))


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None, dim: int = -1) -> torch.Tensor:
    """Max-shifted softmax with masked entries forced to exactly zero."""
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    return F.softmax(logits, dim=dim)
