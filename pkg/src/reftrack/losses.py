"""Training objective: focal loss on the averaged match scores plus a smooth
barrier that keeps reference points away from the edges of the normalized
coordinate square (points otherwise drift into the corners early in training
and die there).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ObjectiveConfig:
    barrier_weight: float = 0.01  # config key "lambda"
    safe_margin: float = 0.1  # config key "delta"
    sharpness: float = 30.0  # config key "alpha_sharp"
    gamma_focal: float = 2.0
    alpha_focal: float = 0.25

    def __post_init__(self):
        if self.barrier_weight < 0:
            raise ValueError("barrier_weight must be >= 0")
        if not 0 < self.safe_margin < 1:
            raise ValueError("safe_margin must be in (0, 1)")
        if self.sharpness <= 0:
            raise ValueError("sharpness must be > 0")


def focal_loss(
    logits: torch.Tensor, labels: torch.Tensor, cfg: ObjectiveConfig
) -> torch.Tensor:
    """Two-class focal loss, mean over pairs.

    logits: [..., 2] (no-match, match); labels: [...] in {0, 1}. Per pair:
    -alpha_t * (1 - p_t)^gamma * log(p_t) with p_t the softmax probability of
    the true class and alpha_t = alpha_focal for positives, 1 - alpha_focal
    for negatives. With gamma 0 and alpha 0.5 this is half the usual
    cross-entropy.
    """
    probs = torch.softmax(logits, dim=-1)
    labels = labels.long()
    p_t = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1).clamp(min=PROB_FLOOR)
    alpha_t = torch.where(
        labels == 1,
        torch.full_like(p_t, cfg.alpha_focal),
        torch.full_like(p_t, 1.0 - cfg.alpha_focal),
    )
    loss = -alpha_t * (1.0 - p_t) ** cfg.gamma_focal * torch.log(p_t)
    return loss.mean()


def focal_loss_single(
    probs: torch.Tensor, labels: torch.Tensor, cfg: ObjectiveConfig
) -> torch.Tensor:
    """Focal loss on an already-formed match probability (baseline scoring).

    probs: [...] in [0, 1]; labels: [...] in {0, 1}.
    """
    labels = labels.to(probs.dtype)
    pos = labels > 0.5
    p_t = torch.where(pos, probs, 1.0 - probs).clamp(min=PROB_FLOOR)
    alpha_t = torch.where(
        pos,
        torch.full_like(p_t, cfg.alpha_focal),
        torch.full_like(p_t, 1.0 - cfg.alpha_focal),
    )
    loss = -alpha_t * (1.0 - p_t) ** cfg.gamma_focal * torch.log(p_t)
    return loss.mean()


def boundary_penalty(points: torch.Tensor, cfg: ObjectiveConfig) -> torch.Tensor:
    """Softplus barrier on reference points near the square's boundary.

    points: [..., 2] with components in [-1, 1] (pass one temporal slice; the
    repeats are identical). Per point, with d = min(1 - |u|, 1 - |v|), the
    penalty is softplus(sharpness * (safe_margin - d)); the result is the
    mean over all points. Zero points (conditioning disabled) yield 0.
    """
    if points.numel() == 0:
        return points.new_zeros(())
    d = (1.0 - points.abs()).amin(dim=-1)
    return F.softplus(cfg.sharpness * (cfg.safe_margin - d)).mean()


def total_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    reference_points: torch.Tensor,
    cfg: ObjectiveConfig,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """focal + barrier_weight * barrier; returns scalar and logged parts."""
    focal = focal_loss(logits, labels, cfg)
    barrier = boundary_penalty(reference_points, cfg)
    total = focal + cfg.barrier_weight * barrier
    return total, {
        "total": float(total.detach()),
        "focal": float(focal.detach()),
        "barrier": float(barrier.detach()),
    }
