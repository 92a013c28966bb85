"""Pluggable visual and text encoders with fixed shape contracts.

Any substitute encoder must honor the same contracts: the visual side emits a
4-level pyramid at strides (4, 8, 16, 32) with a shared channel width, the
text side emits per-token features with pads zeroed. The toy implementations
below are sized for CPU-scale experiments; nothing downstream depends on
their internals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import nn

from .layers import SelfAttentionBlock

PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class FeaturePyramid:
    """Multi-scale feature maps, finest first, channel-last [B, H_l, W_l, C]."""

    levels: Tuple[torch.Tensor, ...]
    strides: Tuple[int, ...] = PYRAMID_STRIDES

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ValueError("one stride per level required")
        widths = {lv.shape[-1] for lv in self.levels}
        if len(widths) > 1:
            raise ValueError(f"levels disagree on channel width: {widths}")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-1]


@dataclass(frozen=True)
class LinguisticFeatures:
    """Per-token text features [B, L, C]; pad positions are zero."""

    values: torch.Tensor
    pad_mask: torch.Tensor  # [B, L], True at padding


@dataclass(frozen=True)
class BackboneConfig:
    channels: int = 64
    image_size: Optional[Tuple[int, int]] = (224, 672)  # (H, W); None = any /32
    bias: bool = True
    # narrow early stages keep CPU cost down; laterals project all to `channels`
    stage_widths: Optional[Tuple[int, int, int, int]] = None

    def resolved_widths(self) -> Tuple[int, int, int, int]:
        if self.stage_widths is not None:
            return self.stage_widths
        c = self.channels
        return (max(2, c // 4), max(2, c // 2), c, c)


class VisualBackbone(nn.Module):
    """Four conv stages (two 3x3 convs each) with top-down lateral fusion.

    Stage strides are 4, 2, 2, 2, so level l sits at stride PYRAMID_STRIDES[l]
    relative to the input. The coarser level is upsampled (nearest) and added
    to the 1x1-projected finer level before output, so downstream samplers see
    already-aggregated maps at every scale.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w1, w2, w3, w4 = cfg.resolved_widths()
        b = cfg.bias

        def stage(cin, cout, strides):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=strides[0], padding=1, bias=b),
                nn.ReLU(),
                nn.Conv2d(cout, cout, 3, stride=strides[1], padding=1, bias=b),
                nn.ReLU(),
            )

        # first stage reaches stride 4 with two stride-2 convs
        self.stage1 = stage(3, w1, (2, 2))
        self.stage2 = stage(w1, w2, (2, 1))
        self.stage3 = stage(w2, w3, (2, 1))
        self.stage4 = stage(w3, w4, (2, 1))
        self.laterals = nn.ModuleList(
            nn.Conv2d(w, cfg.channels, 1, bias=b) for w in (w1, w2, w3, w4)
        )

    def forward(self, frames: torch.Tensor) -> FeaturePyramid:
        """frames: [B, 3, H, W] in [0, 1] -> 4-level pyramid, channel-last."""
        if frames.dim() != 4 or frames.shape[1] != 3:
            raise ValueError(f"expected [B, 3, H, W] frames, got {tuple(frames.shape)}")
        h, w = frames.shape[-2:]
        if self.cfg.image_size is not None and (h, w) != tuple(self.cfg.image_size):
            raise ValueError(
                f"expected input resolution {tuple(self.cfg.image_size)}, got {(h, w)}"
            )
        if h % 32 or w % 32:
            raise ValueError(f"input size must be divisible by 32, got {(h, w)}")
        c1 = self.stage1(frames)
        c2 = self.stage2(c1)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        p4 = self.laterals[3](c4)
        p3 = self.laterals[2](c3) + nn.functional.interpolate(p4, scale_factor=2, mode="nearest")
        p2 = self.laterals[1](c2) + nn.functional.interpolate(p3, scale_factor=2, mode="nearest")
        p1 = self.laterals[0](c1) + nn.functional.interpolate(p2, scale_factor=2, mode="nearest")
        levels = tuple(p.permute(0, 2, 3, 1) for p in (p1, p2, p3, p4))
        return FeaturePyramid(levels=levels)


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    channels: int = 64
    max_len: int = 25
    n_blocks: int = 2


class TextEncoder(nn.Module):
    """Token + position embeddings followed by self-attention blocks.

    Expressions are encoded independently of each other; identical token
    sequences therefore produce identical features wherever they appear.
    """

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.channels)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, cfg.channels))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.blocks = nn.ModuleList(SelfAttentionBlock(cfg.channels) for _ in range(cfg.n_blocks))

    def forward(self, tokens: torch.Tensor, pad_mask: torch.Tensor) -> LinguisticFeatures:
        """tokens: [B, L] int ids; pad_mask: [B, L] bool, True at padding."""
        if tokens.shape[-1] != self.cfg.max_len:
            raise ValueError(f"expected token length {self.cfg.max_len}, got {tokens.shape[-1]}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError("token id outside vocabulary range")
        x = self.token_emb(tokens) + self.pos_emb
        for block in self.blocks:
            x = block(x, pad_mask=pad_mask)
        x = torch.where(pad_mask.unsqueeze(-1), torch.zeros_like(x), x)
        return LinguisticFeatures(values=x, pad_mask=pad_mask)


FREEZE_CHOICES = ("none", "visual", "text", "both")


def freeze_encoders(visual: nn.Module, text: nn.Module, selector: str) -> int:
    """Mark encoder parameters trainable/frozen according to the selector.

    Frozen parameters keep their forward behavior but must be excluded from
    the optimizer (the trainer filters on requires_grad). Returns the number
    of frozen parameters.
    """
    if selector not in FREEZE_CHOICES:
        raise ValueError(f"selector must be one of {FREEZE_CHOICES}")
    frozen = 0
    for module, name in ((visual, "visual"), (text, "text")):
        flag = selector in (name, "both")
        for p in module.parameters():
            p.requires_grad_(not flag)
            if flag:
                frozen += p.numel()
    return frozen
