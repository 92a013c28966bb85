"""Feature construction by sampling instead of re-encoding.

Target features are read straight off the backbone's feature maps through
box-derived coordinate grids, so gradients flow from the match decision back
into both the backbone and the box coordinates. Three stochastic grid
augmentations (frame drop, point jitter, sequence recombination) imitate the
noise a real tracker injects: lost detections, sloppy boxes, identity
switches. A second set of sampling locations is decoded from the expression
itself, letting the language pick image regions worth looking at.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import torch
from torch import nn

from .encoders import LinguisticFeatures
from .layers import MLP, FeedForward, MultiHeadAttention


@dataclass(frozen=True)
class AugmentConfig:
    """Strengths of the three grid augmentations (training only)."""

    drop_prob: float = 0.1
    noise_sigma: float = 0.05  # fraction of box width/height
    swap_prob: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        for name in ("drop_prob", "noise_sigma", "swap_prob"):
            v = getattr(self, name)
            if v < 0 or (name != "noise_sigma" and v > 1):
                raise ValueError(f"{name} out of range: {v}")

    def is_identity(self) -> bool:
        return (
            not self.enabled
            or (self.drop_prob == 0 and self.noise_sigma == 0 and self.swap_prob == 0)
        )


def build_grid(boxes: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Pixel-space sampling grids for xywh boxes.

    boxes: [..., 4] -> grids [..., h, w, 2] with (x, y) last. Grid point
    (row y, col x), 1-based, sits at
        (x0 + (x-1) * w_b / (w-1),  y0 + (y-1) * h_b / (h-1)),
    so the four grid corners coincide with the box corners exactly.
    Differentiable with respect to the box tensor.
    """
    if h < 2 or w < 2:
        raise ValueError(f"grid shape must be at least 2x2, got ({h}, {w})")
    x0, y0, wb, hb = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    sx = torch.arange(w, dtype=boxes.dtype, device=boxes.device) / (w - 1)
    sy = torch.arange(h, dtype=boxes.dtype, device=boxes.device) / (h - 1)
    gx = x0[..., None, None] + sy.new_zeros(h, 1) + sx * wb[..., None, None]
    gy = y0[..., None, None] + sy[:, None] * hb[..., None, None] + sx.new_zeros(w)
    return torch.stack([gx, gy], dim=-1)


def normalize_grid(grid: torch.Tensor, image_size: Tuple[int, int]) -> torch.Tensor:
    """Map pixel coordinates to [-1, 1] with half-pixel alignment.

    -1 is the left/top edge of the image (x = -0.5), +1 the right/bottom edge
    (x = W - 0.5); values are clamped so jittered points stay sampleable.
    """
    img_h, img_w = image_size
    x = 2.0 * (grid[..., 0] + 0.5) / img_w - 1.0
    y = 2.0 * (grid[..., 1] + 0.5) / img_h - 1.0
    return torch.stack([x, y], dim=-1).clamp(-1.0, 1.0)


def bilinear_sample(
    feature_map: torch.Tensor,
    grid: torch.Tensor,
    batch_index: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Bilinear interpolation of a channel-last map at normalized points.

    feature_map: [U, H, W, C]; grid: [B, ..., 2] in [-1, 1] (x, y), -1/+1
    meaning the map's outer edges (half-pixel convention). Points outside the
    map replicate the border. Differentiable in both the map values and the
    grid coordinates.

    By default B must equal U (grid i samples map i). batch_index ([B] of
    map ids) lets several grids share one map, so callers can sample many
    segments off one encoded window without replicating the map.
    All four corner reads go through a single index_select, keeping the
    backward pass to one scatter per call.
    """
    u, h, w, c = feature_map.shape
    b = grid.shape[0]
    pts = grid.reshape(b, -1, 2)
    n_pts = pts.shape[1]
    if batch_index is None:
        if b != u:
            raise ValueError(f"grid batch {b} != feature batch {u}")
        batch_index = torch.arange(u, device=feature_map.device)
    fx = (pts[..., 0] + 1.0) * 0.5 * w - 0.5
    fy = (pts[..., 1] + 1.0) * 0.5 * h - 0.5
    x0 = torch.floor(fx)
    y0 = torch.floor(fy)
    tx = (fx - x0).unsqueeze(-1)
    ty = (fy - y0).unsqueeze(-1)
    x0l = x0.long().clamp(0, w - 1)
    x1l = (x0.long() + 1).clamp(0, w - 1)
    y0l = y0.long().clamp(0, h - 1)
    y1l = (y0.long() + 1).clamp(0, h - 1)
    corners = torch.stack(
        [y0l * w + x0l, y0l * w + x1l, y1l * w + x0l, y1l * w + x1l], dim=1
    )  # [B, 4, P]
    base = (batch_index * (h * w)).view(b, 1, 1)
    flat = feature_map.reshape(u * h * w, c)
    vals = flat.index_select(0, (corners + base).reshape(-1))
    v00, v01, v10, v11 = vals.reshape(b, 4, n_pts, c).unbind(1)
    top = v00 * (1 - tx) + v01 * tx
    bot = v10 * (1 - tx) + v11 * tx
    out = top * (1 - ty) + bot * ty
    return out.reshape(*grid.shape[:-1], c)


def augment_grids(
    grids: Union[torch.Tensor, Sequence[torch.Tensor]],
    present: torch.Tensor,
    cfg: AugmentConfig,
    generator: torch.Generator,
) -> Tuple[Union[torch.Tensor, List[torch.Tensor]], torch.Tensor]:
    """Apply frame drop, Gaussian jitter and sequence recombination.

    grids: [B, p, h, w, 2] pixel-space grids, or a list of such tensors (one
    per pyramid level) sharing the same [B, p]. Frame-level decisions (drops,
    recombinations) are drawn once and applied to every level; jitter is drawn
    independently per point. Returns grids of the same structure plus the
    updated present mask. Frame 0 is never dropped, so each segment keeps an
    anchor grid. Deterministic for a given generator state.
    """
    single = isinstance(grids, torch.Tensor)
    levels: List[torch.Tensor] = [grids] if single else list(grids)
    bsz, p = levels[0].shape[:2]
    present = present.clone()
    if cfg.is_identity():
        out = [g.clone() for g in levels]
        return (out[0] if single else out), present

    device = levels[0].device
    out = [g.clone() for g in levels]

    # (i) frame drop: dropped frames reuse the nearest kept frame's grid
    if cfg.drop_prob > 0:
        dropped = torch.rand(bsz, p, generator=generator, device=device) < cfg.drop_prob
        dropped[:, 0] = False
        kept_idx = torch.zeros(bsz, p, dtype=torch.long, device=device)
        for bi in range(bsz):
            kept = [t for t in range(p) if not dropped[bi, t]]
            for t in range(p):
                kept_idx[bi, t] = min(kept, key=lambda k: (abs(k - t), k))
        for li, g in enumerate(out):
            idx = kept_idx.view(bsz, p, 1, 1, 1).expand_as(g)
            out[li] = torch.gather(g, 1, idx)
        present = present & ~dropped

    # (ii) jitter: per-point Gaussian noise scaled by the grid's box extent
    if cfg.noise_sigma > 0:
        for li, g in enumerate(out):
            span_x = g[..., 0].amax(dim=(-2, -1)) - g[..., 0].amin(dim=(-2, -1))
            span_y = g[..., 1].amax(dim=(-2, -1)) - g[..., 1].amin(dim=(-2, -1))
            scale = torch.stack([span_x, span_y], dim=-1) * cfg.noise_sigma
            noise = torch.randn(g.shape, generator=generator, device=device, dtype=g.dtype)
            out[li] = g + noise * scale[:, :, None, None, :]

    # (iii) recombination: swap a random grid-sequence suffix between segments
    if cfg.swap_prob > 0 and bsz > 1 and p > 1:
        coins = torch.rand(bsz, generator=generator, device=device)
        partners = torch.randint(0, bsz - 1, (bsz,), generator=generator, device=device)
        suffixes = torch.randint(1, p, (bsz,), generator=generator, device=device)
        for bi in range(bsz):
            if coins[bi] >= cfg.swap_prob:
                continue
            other = int(partners[bi])
            if other >= bi:
                other += 1
            s = int(suffixes[bi])
            for g in out:
                tmp = g[bi, s:].clone()
                g[bi, s:] = g[other, s:]
                g[other, s:] = tmp
            tmp = present[bi, s:].clone()
            present[bi, s:] = present[other, s:]
            present[other, s:] = tmp

    return (out[0] if single else out), present


def grid_box_extent(boxes: torch.Tensor) -> torch.Tensor:
    """max(w_b, h_b) per box, used to put displacements on feature scale."""
    return torch.maximum(boxes[..., 2], boxes[..., 3])


@dataclass(frozen=True)
class ReferencePoints:
    """Language-conditioned sampling locations, identical across time.

    points: [p, N_slots, M, 2] in (-1, 1), where N_slots is the expression
    axis (batched callers flatten batch and slot together). Every temporal
    slice is the same tensor repeated, matching the per-frame feature maps it
    is sampled from.
    """

    points: torch.Tensor

    @property
    def per_pair(self) -> torch.Tensor:
        """One temporal slice, [N_slots, M, 2]."""
        return self.points[0]


class ReferencePointDecoder(nn.Module):
    """Decode M normalized 2D points per expression from its token features.

    M learnable query vectors (shared across expression slots, so scores stay
    equivariant to slot order) cross-attend to the expression's tokens; a
    residual MLP refines the result and a sigmoid head produces points in
    (0, 1)^2, mapped to the (-1, 1) grid convention as 2s - 1.
    """

    def __init__(self, channels: int, n_points: int):
        super().__init__()
        self.n_points = n_points
        self.channels = channels
        if n_points > 0:
            self.queries = nn.Parameter(torch.randn(n_points, channels) * 0.02)
            self.attn = MultiHeadAttention(channels)
            self.norm1 = nn.LayerNorm(channels)
            self.mlp = FeedForward(channels)
            self.norm2 = nn.LayerNorm(channels)
            self.head = nn.Linear(channels, 2)

    def forward(self, text: LinguisticFeatures, n_frames: int) -> ReferencePoints:
        """text.values: [N_slots, L, C] -> points [n_frames, N_slots, M, 2]."""
        values, pad = text.values, text.pad_mask
        bn = values.shape[0]
        if self.n_points == 0:
            pts = values.new_zeros(bn, 0, 2)
            return ReferencePoints(points=pts.unsqueeze(0).expand(n_frames, -1, -1, -1))
        q = self.queries.unsqueeze(0).expand(bn, -1, -1)
        x = self.norm1(q + self.attn(q, values, values, key_mask=pad))
        x = self.norm2(x + self.mlp(x))
        pts = 2.0 * torch.sigmoid(self.head(x)) - 1.0  # [bn, M, 2]
        return ReferencePoints(points=pts.unsqueeze(0).expand(n_frames, -1, -1, -1))


def sample_references(feature_map: torch.Tensor, refs: ReferencePoints) -> torch.Tensor:
    """Sample the full map at each reference point, per frame.

    feature_map: [p, H, W, C] (one video's per-frame maps); refs carry
    [p, N, M, 2]. Returns [p, N, M, C]. Reference points are image-global:
    they are not tied to any box.
    """
    return bilinear_sample(feature_map, refs.points)
