"""Fusing per-frame samples into one trajectory feature.

The sampling grids give motion away for free: differencing consecutive
frames' grids yields an explicit per-point displacement field, a small-scale
stand-in for optical flow. Those displacements are stacked with the frames'
sampled features along channels and compressed by an MLP. Reference samples
carry no motion, so they are just averaged over time.
"""

from __future__ import annotations

import torch
from torch import nn

from .layers import MLP


def grid_displacements(grids: torch.Tensor) -> torch.Tensor:
    """Per-point displacement between consecutive frames' pixel grids.

    grids: [..., p, h, w, 2] -> [..., h, w, (p-1)*2], channel-stacked in
    frame order. Computed on pixel-space grids, before normalization. For
    p == 1 the result has zero channels.
    """
    p = grids.shape[-4]
    diffs = grids[..., 1:, :, :, :] - grids[..., :-1, :, :, :]  # [..., p-1, h, w, 2]
    moved = torch.movedim(diffs, -4, -2)  # [..., h, w, p-1, 2]
    return moved.reshape(*moved.shape[:-2], (p - 1) * 2)


class TrajectoryFuser(nn.Module):
    """Concatenate p frames' features with the displacement field and
    compress back to C channels with a two-layer MLP.

    Fused width is exactly p*C + (p-1)*2. Displacements are divided by
    max(w_b, h_b) of the segment's first-frame box (when scale_displacements
    is set) so they live on roughly unit scale next to the features.
    """

    def __init__(self, channels: int, n_frames: int, scale_displacements: bool = True):
        super().__init__()
        self.channels = channels
        self.n_frames = n_frames
        self.scale_displacements = scale_displacements
        fused = n_frames * channels + (n_frames - 1) * 2
        self.mlp = MLP([fused, 2 * channels, channels])

    def forward(
        self,
        frame_features: torch.Tensor,  # [B, p, h, w, C]
        displacements: torch.Tensor,  # [B, h, w, (p-1)*2]
        first_box_extent: torch.Tensor,  # [B], max(w_b, h_b) of frame 0
    ) -> torch.Tensor:
        b, p, h, w, c = frame_features.shape
        if p != self.n_frames:
            raise ValueError(f"expected {self.n_frames} frames, got {p}")
        stacked = frame_features.permute(0, 2, 3, 1, 4).reshape(b, h, w, p * c)
        if displacements.shape[-1] != (p - 1) * 2:
            raise ValueError(
                f"expected {(p - 1) * 2} displacement channels, "
                f"got {displacements.shape[-1]}"
            )
        if self.scale_displacements:
            displacements = displacements / first_box_extent.clamp(min=1e-6).view(
                b, 1, 1, 1
            )
        fused = torch.cat([stacked, displacements], dim=-1)
        return self.mlp(fused)


def pool_references(reference_samples: torch.Tensor, time_dim: int = 0) -> torch.Tensor:
    """Mean over the time axis: [p, N, M, C] -> [N, M, C].

    Batched callers with [B, p, N, M, C] pass time_dim=1.
    """
    return reference_samples.mean(dim=time_dim)
