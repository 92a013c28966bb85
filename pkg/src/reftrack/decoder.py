"""Pairwise match decoding over a shared trajectory.

Each of the N expression slots owns one learnable query (a single seed vector
broadcast over slots, so nothing depends on slot order). Queries cross-attend
over the concatenation [trajectory | reference | linguistic features] under a
block mask: every slot sees the whole trajectory block but only its own
expression's reference and linguistic blocks. The attention is evaluated in
gathered per-slot form, which realizes the mask exactly and makes two
contracts hold bitwise: a slot's logits never depend on other slots' inputs,
and permuting the expressions permutes the logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import torch
from torch import nn

from .layers import MLP, FeedForward, heads_for, masked_softmax


def build_mask(
    hw: int,
    n_slots: int,
    n_points: int,
    text_len: int,
    pad_masks: torch.Tensor,
) -> torch.Tensor:
    """Block attention mask, True = may attend.

    Key layout is [trajectory (hw) | reference (n_slots * n_points) |
    linguistic (n_slots * text_len)]. Row i allows the whole trajectory
    block, reference block i, and the non-pad positions of linguistic block
    i, i.e. exactly hw + n_points + (text_len - pads_i) keys.

    pad_masks: [..., n_slots, text_len], True at padding. Returns
    [..., n_slots, hw + n_slots * (n_points + text_len)].
    """
    if pad_masks.shape[-2:] != (n_slots, text_len):
        raise ValueError(
            f"pad_masks must end in ({n_slots}, {text_len}), got {tuple(pad_masks.shape)}"
        )
    lead = pad_masks.shape[:-2]
    device = pad_masks.device
    eye = torch.eye(n_slots, dtype=torch.bool, device=device)
    traj = torch.ones(n_slots, hw, dtype=torch.bool, device=device)
    ref = eye.repeat_interleave(n_points, dim=1) if n_points else torch.zeros(
        n_slots, 0, dtype=torch.bool, device=device
    )
    own_text = eye.repeat_interleave(text_len, dim=1)  # [n, n*L]
    flat_pads = pad_masks.reshape(*lead, 1, n_slots * text_len)
    ling = own_text & ~flat_pads
    traj = traj.expand(*lead, -1, -1)
    ref = ref.expand(*lead, -1, -1)
    return torch.cat([traj, ref, ling], dim=-1)


def gathered_mask(
    mask: torch.Tensor, hw: int, n_slots: int, n_points: int, text_len: int
) -> torch.Tensor:
    """Per-slot view of the block mask: [..., n, hw + n_points + text_len].

    Row i keeps the trajectory block plus its own diagonal reference and
    linguistic blocks; by construction the dropped off-diagonal entries are
    all False.
    """
    expected = hw + n_slots * (n_points + text_len)
    if mask.shape[-1] != expected or mask.shape[-2] != n_slots:
        raise ValueError(
            f"mask shape {tuple(mask.shape)} inconsistent with "
            f"(hw={hw}, n={n_slots}, M={n_points}, L={text_len})"
        )
    idx = torch.arange(n_slots, device=mask.device)
    traj = mask[..., :hw]
    ref_block = mask[..., hw : hw + n_slots * n_points]
    ref_block = ref_block.reshape(*mask.shape[:-1], n_slots, n_points)
    ref = ref_block[..., idx, idx, :]
    ling_block = mask[..., hw + n_slots * n_points :]
    ling_block = ling_block.reshape(*mask.shape[:-1], n_slots, text_len)
    ling = ling_block[..., idx, idx, :]
    return torch.cat([traj, ref, ling], dim=-1)


@dataclass(frozen=True)
class MatchScores:
    """Two-logit (no-match, match) outputs per decoder level and their mean."""

    per_level: Tuple[torch.Tensor, ...]  # each [..., n_slots, 2]
    averaged: torch.Tensor

    @staticmethod
    def from_levels(levels: List[torch.Tensor]) -> "MatchScores":
        stacked = torch.stack(levels)
        return MatchScores(per_level=tuple(levels), averaged=stacked.mean(dim=0))

    def match_probability(self) -> torch.Tensor:
        """softmax over the averaged logits, probability of the match class."""
        return torch.softmax(self.averaged, dim=-1)[..., 1]


class PairDecoderLayer(nn.Module):
    """One level of masked pairwise cross-attention decoding.

    forward returns the refined queries (handed to the next level) and this
    level's match logits.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.n_heads = heads_for(channels)
        self.head_dim = channels // self.n_heads
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)
        self.norm1 = nn.LayerNorm(channels)
        self.ffn = FeedForward(channels)
        self.norm2 = nn.LayerNorm(channels)
        self.score_head = MLP([channels, channels, 2])

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        """[..., K, C] -> [..., H, K, D]"""
        out = x.view(*x.shape[:-1], self.n_heads, self.head_dim)
        return out.movedim(-2, -3)

    def forward(
        self,
        queries: torch.Tensor,  # [B, N, C]
        trajectory: torch.Tensor,  # [B, hw, C]
        references: torch.Tensor,  # [B, N, M, C]
        linguistic: torch.Tensor,  # [B, N, L, C]
        mask: torch.Tensor,  # [B, N, hw + N*(M+L)], True = allowed
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        b, n, c = queries.shape
        hw = trajectory.shape[1]
        m = references.shape[2]
        l = linguistic.shape[2]
        slot_mask = gathered_mask(mask, hw, n, m, l)  # [B, N, hw+M+L]

        q = self._heads(self.q_proj(queries))  # [B, H, N, D]
        k_traj = self._heads(self.k_proj(trajectory))  # [B, H, hw, D]
        v_traj = self._heads(self.v_proj(trajectory))
        k_ref = self._heads(self.k_proj(references))  # [B, N, H, M, D]
        v_ref = self._heads(self.v_proj(references))
        k_ling = self._heads(self.k_proj(linguistic))  # [B, N, H, L, D]
        v_ling = self._heads(self.v_proj(linguistic))

        scale = 1.0 / math.sqrt(self.head_dim)
        s_traj = torch.einsum("bhnd,bhkd->bhnk", q, k_traj) * scale
        s_ref = torch.einsum("bhnd,bnhmd->bhnm", q, k_ref) * scale
        s_ling = torch.einsum("bhnd,bnhld->bhnl", q, k_ling) * scale
        scores = torch.cat([s_traj, s_ref, s_ling], dim=-1)  # [B, H, N, hw+M+L]

        weights = masked_softmax(scores, ~slot_mask)
        w_traj = weights[..., :hw]
        w_ref = weights[..., hw : hw + m]
        w_ling = weights[..., hw + m :]
        out = (
            torch.einsum("bhnk,bhkd->bhnd", w_traj, v_traj)
            + torch.einsum("bhnm,bnhmd->bhnd", w_ref, v_ref)
            + torch.einsum("bhnl,bnhld->bhnd", w_ling, v_ling)
        )
        out = out.movedim(1, 2).reshape(b, n, c)
        attn = self.out_proj(out)

        x = self.norm1(queries + attn)
        x = self.norm2(x + self.ffn(x))
        return x, self.score_head(x)
