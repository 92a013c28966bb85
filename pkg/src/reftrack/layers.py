"""Small building blocks shared by the encoders and decoders.

The attention here is hand-rolled rather than taken from torch.nn so that
masking semantics are exact: disallowed keys are excluded via -inf before the
softmax (never by additive penalties), which is what makes the pairwise
isolation guarantees of the match decoder hold bitwise.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn


def heads_for(channels: int) -> int:
    """Head count scales with width (one head per 16 channels, min 1)."""
    return max(1, channels // 16)


class MultiHeadAttention(nn.Module):
    """Masked scaled dot-product attention over explicit key/value tensors.

    key_mask semantics: True marks keys a query may NOT attend to. Rows whose
    keys are all masked produce zero output instead of NaN.
    """

    def __init__(self, channels: int, n_heads: Optional[int] = None):
        super().__init__()
        self.channels = channels
        self.n_heads = n_heads or heads_for(channels)
        if channels % self.n_heads != 0:
            raise ValueError(f"channels {channels} not divisible by {self.n_heads} heads")
        self.head_dim = channels // self.n_heads
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)

    def forward(
        self,
        query: torch.Tensor,  # [B, Nq, C]
        key: torch.Tensor,  # [B, Nk, C]
        value: torch.Tensor,  # [B, Nk, C]
        key_mask: Optional[torch.Tensor] = None,  # [B, Nk] or [B, Nq, Nk], True = blocked
    ) -> torch.Tensor:
        b, nq, _ = query.shape
        nk = key.shape[1]
        q = self._split(self.q_proj(query))  # [B, H, Nq, D]
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = torch.einsum("bhqd,bhkd->bhqk", q, k) / math.sqrt(self.head_dim)
        weights = masked_softmax(scores, key_mask)
        out = torch.einsum("bhqk,bhkd->bhqd", weights, v)
        out = out.permute(0, 2, 1, 3).reshape(b, nq, self.channels)
        return self.out_proj(out)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.head_dim).permute(0, 2, 1, 3)


def masked_softmax(scores: torch.Tensor, key_mask: Optional[torch.Tensor]) -> torch.Tensor:
    """Softmax over the last dim with blocked keys removed via -inf.

    Rows with every key blocked yield all-zero weights (no NaN), so queries
    with nothing to look at contribute nothing downstream.
    """
    if key_mask is not None:
        while key_mask.dim() < scores.dim():
            key_mask = key_mask.unsqueeze(1)
        scores = scores.masked_fill(key_mask, float("-inf"))
    row_max = scores.amax(dim=-1, keepdim=True)
    row_max = torch.where(torch.isfinite(row_max), row_max, torch.zeros_like(row_max))
    w = torch.exp(scores - row_max)
    denom = w.sum(dim=-1, keepdim=True)
    return w / denom.clamp(min=torch.finfo(w.dtype).tiny)


class FeedForward(nn.Module):
    """Two-layer MLP used inside transformer blocks."""

    def __init__(self, channels: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or 2 * channels
        self.net = nn.Sequential(
            nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class SelfAttentionBlock(nn.Module):
    """Post-norm transformer encoder block with key padding support."""

    def __init__(self, channels: int):
        super().__init__()
        self.attn = MultiHeadAttention(channels)
        self.norm1 = nn.LayerNorm(channels)
        self.ffn = FeedForward(channels)
        self.norm2 = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor, pad_mask: Optional[torch.Tensor] = None):
        x = self.norm1(x + self.attn(x, x, x, key_mask=pad_mask))
        x = self.norm2(x + self.ffn(x))
        return x


class MLP(nn.Module):
    """Stack of Linear/ReLU layers; no activation after the last layer."""

    def __init__(self, dims: list[int]):
        super().__init__()
        layers: list[nn.Module] = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)
