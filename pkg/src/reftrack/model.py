"""End-to-end match scoring: encode once, sample per level, decode pairwise.

For one trajectory segment and N expressions the model encodes the segment's
frames into a 4-level pyramid, then per level: builds the segment's box grids
at that level's sample shape, (in training) perturbs them with tracking-noise
augmentations, samples target and reference features, fuses frames with grid
displacements, and runs one pairwise decoder level whose refined queries feed
the next level. The four per-level logit pairs are averaged into the final
match scores.

Ablation variants swap out exactly one mechanism: "no_ti" replaces the
displacement fusion with temporal mean pooling, "no_pcd" replaces the decoder
with mapped cosine similarity, and "no_conditioning" drops the reference
points (M = 0).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import torch
from torch import nn

from .decoder import MatchScores, PairDecoderLayer, build_mask
from .encoders import (
    BackboneConfig,
    FeaturePyramid,
    TextEncoder,
    TextEncoderConfig,
    VisualBackbone,
    freeze_encoders,
)
from .evaluation import cosine_baseline
from .ingest import Vocabulary
from .sampling import (
    AugmentConfig,
    ReferencePointDecoder,
    ReferencePoints,
    augment_grids,
    bilinear_sample,
    build_grid,
    grid_box_extent,
    normalize_grid,
)
from .temporal import TrajectoryFuser, grid_displacements, pool_references

VARIANTS = ("full", "no_ti", "no_pcd", "no_conditioning")

CHECKPOINT_FORMAT_VERSION = 2


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    channels: int = 64
    segment_length: int = 4
    n_ref_points: int = 10
    max_text_len: int = 25
    image_size: Tuple[int, int] = (224, 672)
    sample_shapes: Tuple[Tuple[int, int], ...] = ((16, 48), (8, 24), (4, 12), (2, 6))
    variant: str = "full"
    fine_to_coarse: bool = True
    tie_levels: bool = False
    thread_queries: bool = True
    scale_displacements: bool = True
    backbone_bias: bool = True
    stage_widths: Optional[Tuple[int, int, int, int]] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if len(self.sample_shapes) != 4:
            raise ValueError("expected one sample shape per pyramid level (4)")

    @property
    def effective_ref_points(self) -> int:
        if self.variant in ("no_conditioning", "no_pcd"):
            return 0
        return self.n_ref_points


@dataclass(frozen=True)
class ModelOutput:
    """probabilities: [B, N] match probability (softmax of averaged logits,
    or mapped cosine for the similarity baseline)."""

    probabilities: torch.Tensor
    scores: Optional[MatchScores]  # None for the cosine variant
    reference_points: Optional[ReferencePoints]  # None when conditioning is off


class MatchingModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.backbone = VisualBackbone(
            BackboneConfig(
                channels=c,
                image_size=cfg.image_size,
                bias=cfg.backbone_bias,
                stage_widths=cfg.stage_widths,
            )
        )
        self.text_encoder = TextEncoder(
            TextEncoderConfig(vocab_size=cfg.vocab_size, channels=c, max_len=cfg.max_text_len)
        )
        m_eff = cfg.effective_ref_points
        self.ref_decoder = ReferencePointDecoder(c, m_eff) if m_eff > 0 else None
        n_levels = len(cfg.sample_shapes)
        n_units = 1 if cfg.tie_levels else n_levels
        # the cosine baseline matches the no-fusion setting: pooling only
        if cfg.variant not in ("no_ti", "no_pcd"):
            self.fusers = nn.ModuleList(
                TrajectoryFuser(c, cfg.segment_length, cfg.scale_displacements)
                for _ in range(n_units)
            )
        else:
            self.fusers = None
        if cfg.variant != "no_pcd":
            self.query_seed = nn.Parameter(torch.randn(c) * 0.02)
            self.pair_decoders = nn.ModuleList(PairDecoderLayer(c) for _ in range(n_units))
        else:
            self.query_seed = None
            self.pair_decoders = None

    def _unit(self, modules: nn.ModuleList, level: int) -> nn.Module:
        return modules[0] if self.cfg.tie_levels else modules[level]

    def encode_frames(self, frames: torch.Tensor) -> FeaturePyramid:
        """frames: [B, p, 3, H, W] in [0, 1] -> pyramid with [B*p, ...] levels."""
        b, p = frames.shape[:2]
        return self.backbone(frames.reshape(b * p, *frames.shape[2:]))

    def forward(
        self,
        frames: torch.Tensor,  # [B, p, 3, H, W], values in [0, 1]
        boxes: torch.Tensor,  # [B, p, 4] xywh pixels
        present: torch.Tensor,  # [B, p] bool
        tokens: torch.Tensor,  # [B, N, L] int
        pad_mask: torch.Tensor,  # [B, N, L] bool
        augment: Optional[AugmentConfig] = None,
        generator: Optional[torch.Generator] = None,
    ) -> ModelOutput:
        pyramid = self.encode_frames(frames)
        return self.decode(pyramid, boxes, present, tokens, pad_mask, augment, generator)

    def decode(
        self,
        pyramid: FeaturePyramid,
        boxes: torch.Tensor,
        present: torch.Tensor,
        tokens: torch.Tensor,
        pad_mask: torch.Tensor,
        augment: Optional[AugmentConfig] = None,
        generator: Optional[torch.Generator] = None,
        window_index: Optional[torch.Tensor] = None,
    ) -> ModelOutput:
        """Run sampling, fusion and pairwise decoding on an encoded pyramid.

        Levels are visited fine-to-coarse (or reversed per config), each level
        handing its refined queries to the next. When several segments share
        an encoded window, pass pyramid levels for the unique windows only and
        window_index ([B] of window ids) to map segments onto them.
        """
        cfg = self.cfg
        b, p, _ = boxes.shape
        n = tokens.shape[1]
        l = cfg.max_text_len
        if window_index is None:
            window_index = torch.arange(b, device=boxes.device)
        # per-frame map id for each segment frame: window * p + frame
        frame_index = (
            window_index.unsqueeze(1) * p
            + torch.arange(p, device=boxes.device).unsqueeze(0)
        ).reshape(-1)

        text = self.text_encoder(
            tokens.reshape(b * n, l), pad_mask.reshape(b * n, l)
        )
        f_l = text.values.reshape(b, n, l, -1)

        refs = None
        ref_grid = None
        if self.ref_decoder is not None:
            refs = self.ref_decoder(text, n_frames=p)  # [p, B*N, M, 2]
            m = cfg.effective_ref_points
            ref_grid = (
                refs.points.reshape(p, b, n, m, 2)
                .permute(1, 0, 2, 3, 4)
                .reshape(b * p, n, m, 2)
            )

        grids = [build_grid(boxes, h, w) for (h, w) in cfg.sample_shapes]
        if augment is not None and not augment.is_identity():
            if generator is None:
                raise ValueError("augmentation requires an explicit generator")
            grids, present = augment_grids(grids, present, augment, generator)

        order = range(len(cfg.sample_shapes))
        if not cfg.fine_to_coarse:
            order = reversed(order)

        level_logits: List[torch.Tensor] = []
        level_probs: List[torch.Tensor] = []
        queries = (
            self.query_seed.expand(b, n, cfg.channels) if self.query_seed is not None else None
        )
        for li in order:
            h, w = cfg.sample_shapes[li]
            level_map = pyramid.levels[li]  # [U*p, H_l, W_l, C]
            norm = normalize_grid(grids[li], cfg.image_size)
            j = bilinear_sample(
                level_map, norm.reshape(b * p, h, w, 2), batch_index=frame_index
            )
            j = j.reshape(b, p, h, w, -1)

            if self.fusers is None:
                f_j = j.mean(dim=1)
            else:
                disp = grid_displacements(grids[li])
                f_j = self._unit(self.fusers, li)(
                    j, disp, grid_box_extent(boxes[:, 0])
                )

            if ref_grid is not None:
                r = bilinear_sample(level_map, ref_grid, batch_index=frame_index)
                f_r = pool_references(
                    r.reshape(b, p, *r.shape[1:]), time_dim=1
                )
            else:
                f_r = f_j.new_zeros(b, n, 0, cfg.channels)

            if cfg.variant == "no_pcd":
                traj_vec = f_j.mean(dim=(1, 2))  # [B, C]
                n_real = (~pad_mask).sum(dim=-1, keepdim=True)  # [B, N, 1]
                text_vec = f_l.sum(dim=2) / n_real.clamp(min=1)
                level_probs.append(cosine_baseline(traj_vec, text_vec))
            else:
                mask = build_mask(h * w, n, f_r.shape[2], l, pad_mask)
                flat_traj = f_j.reshape(b, h * w, cfg.channels)
                refined, logits = self._unit(self.pair_decoders, li)(
                    queries, flat_traj, f_r, f_l, mask
                )
                if cfg.thread_queries:
                    queries = refined
                level_logits.append(logits)

        if cfg.variant == "no_pcd":
            probs = torch.stack(level_probs).mean(dim=0)
            return ModelOutput(probabilities=probs, scores=None, reference_points=refs)
        scores = MatchScores.from_levels(level_logits)
        return ModelOutput(
            probabilities=scores.match_probability(),
            scores=scores,
            reference_points=refs,
        )

    def freeze_encoders(self, selector: str) -> int:
        """Exclude encoder parameters from training; see encoders.freeze_encoders."""
        return freeze_encoders(self.backbone, self.text_encoder, selector)

    def frozen_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if not p.requires_grad)


def save_checkpoint(path, model: MatchingModel, vocab: Vocabulary, extra: dict | None = None):
    """Versioned checkpoint: header fields + config + vocab + weights."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "channels": model.cfg.channels,
        "vocab_hash": vocab.content_hash(),
        "model_config": asdict(model.cfg),
        "vocab_words": list(vocab.words),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path, map_location="cpu") -> Tuple[MatchingModel, Vocabulary, dict]:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {version} not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    vocab = Vocabulary(tuple(payload["vocab_words"]))
    if vocab.content_hash() != payload["vocab_hash"]:
        raise CheckpointError("vocabulary hash mismatch; checkpoint corrupt")
    raw = dict(payload["model_config"])
    raw["sample_shapes"] = tuple(tuple(s) for s in raw["sample_shapes"])
    raw["image_size"] = tuple(raw["image_size"])
    if raw.get("stage_widths") is not None:
        raw["stage_widths"] = tuple(raw["stage_widths"])
    cfg = ModelConfig(**raw)
    model = MatchingModel(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, vocab, payload["extra"]
