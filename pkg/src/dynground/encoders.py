"""Toy image and expression encoders.

The image encoder is a three-block strided conv stack (64x64 -> 8x8); the
expression encoder is token + learned position embeddings followed by one
masked self-attention layer and a linear projection into the shared feature
dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import TransformerLayer
from .synth_env import CLS_ID, N_MAX, PAD_ID, VOCAB_SIZE


@dataclass
class EncoderConfig:
    channel_dim: int = 64
    word_dim: int = 64
    spatial_side: int = 8
    vocab_size: int = VOCAB_SIZE
    image_px: int = 64
    n_max: int = N_MAX
    expr_heads: int = 4
    norm_groups: int = 8

    def __post_init__(self):
        if self.channel_dim != self.word_dim:
            raise ValueError("channel_dim and word_dim must match")
        if self.image_px != self.spatial_side * 8:
            raise ValueError("image encoder downsamples by exactly 8")


@dataclass
class ImageFeatureMap:
    data: torch.Tensor  # (B, S, S, C)

    @property
    def flat(self) -> torch.Tensor:
        b, s, _, c = self.data.shape
        return self.data.reshape(b, s * s, c)

    def pooled(self) -> torch.Tensor:
        """Spatial average, (B, C)."""
        return self.data.mean(dim=(1, 2))


@dataclass
class WordFeatureMatrix:
    data: torch.Tensor  # (B, N, d)
    mask: torch.Tensor  # (B, N) bool, True for real tokens

    @property
    def cls_vector(self) -> torch.Tensor:
        return self.data[:, 0]


def _conv_block(c_in, c_out, groups, use_norm):
    layers = [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)]
    if use_norm:
        layers.append(nn.GroupNorm(min(groups, c_out), c_out))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class ImageEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, use_norm: bool = True):
        super().__init__()
        self.config = config
        c = config.channel_dim
        self.blocks = nn.Sequential(
            _conv_block(3, c // 4, config.norm_groups, use_norm),
            _conv_block(c // 4, c // 2, config.norm_groups, use_norm),
            _conv_block(c // 2, c, config.norm_groups, use_norm),
        )
        # 1x1 conv + norm + relu into the common dimension
        self.project = nn.Sequential(
            nn.Conv2d(c, c, 1),
            nn.GroupNorm(config.norm_groups, c) if use_norm else nn.Identity(),
            nn.ReLU(),
        )

    def forward(self, images: torch.Tensor) -> ImageFeatureMap:
        """``images``: (B, H, W, 3) in [0, 1]."""
        px = self.config.image_px
        if images.dim() != 4 or images.shape[1:] != (px, px, 3):
            raise ValueError(f"expected images of shape (B, {px}, {px}, 3), got {tuple(images.shape)}")
        x = self.project(self.blocks(images.permute(0, 3, 1, 2)))
        return ImageFeatureMap(x.permute(0, 2, 3, 1))


class ExpressionEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.word_dim
        self.token_embed = nn.Embedding(config.vocab_size, d, padding_idx=PAD_ID)
        self.pos_embed = nn.Parameter(torch.randn(config.n_max, d) * 0.1)
        self.layer = TransformerLayer(d, config.expr_heads, 2 * d)
        self.project = nn.Linear(d, config.channel_dim)

    def forward(self, tokens: torch.Tensor) -> WordFeatureMatrix:
        """``tokens``: (B, N) integer ids, N <= n_max, CLS first."""
        if tokens.shape[-1] > self.config.n_max:
            raise ValueError(f"sequence length {tokens.shape[-1]} exceeds {self.config.n_max}")
        if (tokens < 0).any() or (tokens >= self.config.vocab_size).any():
            raise ValueError(f"token id out of vocabulary (size {self.config.vocab_size})")
        mask = tokens != PAD_ID
        n = tokens.shape[-1]
        x = self.token_embed(tokens) + self.pos_embed[:n]
        x = self.layer(x, key_mask=mask)
        return WordFeatureMatrix(self.project(x), mask)


def encode_image(images: torch.Tensor, encoder: ImageEncoder) -> ImageFeatureMap:
    return encoder(images)


def encode_expression(tokens: torch.Tensor, encoder: ExpressionEncoder) -> WordFeatureMatrix:
    if tokens.dim() == 1:
        tokens = tokens[None]
    if (tokens[:, 0] != CLS_ID).any():
        raise ValueError("expressions must start with the CLS token")
    return encoder(tokens)
