"""Expression sampling, batching and the optimization loop.

Training is deterministic under a seed on one device: model init, batch
order, expression sampling and grid augmentation all draw from generators
seeded from TrainConfig.seed, and no multi-process data loading is used.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .core import Expression, MatchingRelation, TrajectorySegment, segment_label, window_segments
from .datasets import ClipCache, SceneBundle
from .ingest import Vocabulary
from .losses import ObjectiveConfig, focal_loss_single, total_loss
from .model import MatchingModel, ModelConfig, save_checkpoint
from .sampling import AugmentConfig


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; message carries the offending batch diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    segment_length: int = 4
    n_expressions: int = 36  # expression slots scored per segment
    n_ref_points: int = 10
    max_text_len: int = 25
    channels: int = 64
    epochs: int = 20
    learning_rate: float = 3e-5
    weight_decay: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    pos_fraction: float = 0.25
    window_stride: int = 4
    grad_clip: float = 1.0
    freeze: str = "none"
    variant: str = "full"
    image_size: Tuple[int, int] = (224, 672)
    # when set, run exactly this many steps, cycling through epochs as needed
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.n_expressions < 2:
            raise ValueError("n_expressions must be >= 2")
        if not 0 < self.pos_fraction < 1:
            raise ValueError("pos_fraction must be in (0, 1)")

    def model_config(self, vocab_size: int, **overrides) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            channels=self.channels,
            segment_length=self.segment_length,
            n_ref_points=self.n_ref_points,
            max_text_len=self.max_text_len,
            image_size=self.image_size,
            variant=self.variant,
            **overrides,
        )


def sample_expressions(
    segment: TrajectorySegment,
    expressions: Sequence[Expression],
    relation: MatchingRelation,
    n_slots: int,
    pos_fraction: float,
    rng: np.random.Generator,
) -> List[Tuple[Expression, int]]:
    """Fill n_slots with (expression, label) pairs for one segment.

    Up to round(pos_fraction * n_slots) slots take positive expressions, the
    rest negatives, each pool sampled without replacement; a pool smaller
    than its quota is reused with replacement. If one pool is empty the other
    fills every slot. Slot order is shuffled.
    """
    if not expressions:
        raise ValueError("expression set is empty")
    pos = [e for e in expressions if segment_label(relation, segment, e.expr_id) == 1]
    neg = [e for e in expressions if segment_label(relation, segment, e.expr_id) == 0]
    n_pos = int(round(pos_fraction * n_slots)) if pos else 0
    n_pos = min(n_pos, n_slots) if neg else n_slots
    n_neg = n_slots - n_pos

    def draw(pool: List[Expression], k: int) -> List[Expression]:
        if k == 0:
            return []
        if len(pool) >= k:
            idx = rng.choice(len(pool), size=k, replace=False)
        else:
            idx = rng.choice(len(pool), size=k, replace=True)
        return [pool[i] for i in idx]

    slate = [(e, 1) for e in draw(pos, n_pos)] + [(e, 0) for e in draw(neg, n_neg)]
    order = rng.permutation(len(slate))
    return [slate[i] for i in order]


@dataclass
class SegmentExample:
    scene_index: int
    segment: TrajectorySegment


def enumerate_segments(scenes: Sequence[SceneBundle], cfg: TrainConfig) -> List[SegmentExample]:
    out: List[SegmentExample] = []
    for si, scene in enumerate(scenes):
        for traj in scene.tracks.trajectories:
            for seg in window_segments(traj, cfg.segment_length, cfg.window_stride):
                if seg.start_frame + cfg.segment_length <= scene.frame_count:
                    out.append(SegmentExample(si, seg))
    return out


def collate_batch(
    scenes: Sequence[SceneBundle],
    examples: Sequence[SegmentExample],
    cfg: TrainConfig,
    cache: ClipCache,
    rng: np.random.Generator,
) -> Dict[str, torch.Tensor]:
    """Tensors for one training step.

    Segments from the same scene window share their frames, so frames are
    stored once per unique window ("frames", [U, p, 3, H, W]) with
    "window_index" mapping each segment to its window. The heavy frame
    encoding then runs once per window instead of once per segment.
    """
    frames, window_index = [], []
    window_of: Dict[Tuple[int, int], int] = {}
    boxes, present, tokens, pads, labels = [], [], [], [], []
    for ex in examples:
        scene = scenes[ex.scene_index]
        key = (ex.scene_index, ex.segment.start_frame)
        if key not in window_of:
            stack = cache.frames(scene)
            s = ex.segment.start_frame
            window_of[key] = len(frames)
            frames.append(stack[s : s + cfg.segment_length])
        window_index.append(window_of[key])
        boxes.append(ex.segment.box_array())
        present.append(list(ex.segment.present))
        slate = sample_expressions(
            ex.segment,
            scene.expressions,
            scene.relation,
            cfg.n_expressions,
            cfg.pos_fraction,
            rng,
        )
        tokens.append([e.tokens for e, _ in slate])
        pads.append([e.pad_mask for e, _ in slate])
        labels.append([lbl for _, lbl in slate])
    return {
        "frames": torch.from_numpy(np.stack(frames)).float().div_(255.0),
        "window_index": torch.tensor(window_index, dtype=torch.long),
        "boxes": torch.from_numpy(np.stack(boxes)).float(),
        "present": torch.tensor(present, dtype=torch.bool),
        "tokens": torch.tensor(tokens, dtype=torch.long),
        "pad_mask": torch.tensor(pads, dtype=torch.bool),
        "labels": torch.tensor(labels, dtype=torch.long),
    }


def compute_loss(model: MatchingModel, batch: Dict[str, torch.Tensor], objective: ObjectiveConfig,
                 augment: Optional[AugmentConfig], generator: Optional[torch.Generator]):
    pyramid = model.encode_frames(batch["frames"])
    out = model.decode(
        pyramid,
        batch["boxes"],
        batch["present"],
        batch["tokens"],
        batch["pad_mask"],
        augment=augment,
        generator=generator,
        window_index=batch["window_index"],
    )
    if out.scores is None:
        loss = focal_loss_single(out.probabilities, batch["labels"], objective)
        parts = {"total": float(loss.detach()), "focal": float(loss.detach()), "barrier": 0.0}
    else:
        ref_pts = (
            out.reference_points.per_pair
            if out.reference_points is not None
            else out.probabilities.new_zeros(0, 2)
        )
        loss, parts = total_loss(out.scores.averaged, batch["labels"], ref_pts, objective)
    acc = float(((out.probabilities >= 0.5).long() == batch["labels"]).float().mean())
    parts["accuracy"] = acc
    return loss, parts


@dataclass
class TrainResult:
    model: MatchingModel
    checkpoint_path: Optional[Path]
    metrics_path: Optional[Path]
    history: List[Dict[str, float]] = field(default_factory=list)


def train(
    scenes: Sequence[SceneBundle],
    vocab: Vocabulary,
    cfg: TrainConfig,
    objective: Optional[ObjectiveConfig] = None,
    augment: Optional[AugmentConfig] = None,
    out_dir=None,
    model_overrides: Optional[dict] = None,
    log=None,
) -> TrainResult:
    """Train a matching model on scene bundles.

    Writes per-epoch checkpoints and a CSV metric log (step, total, focal,
    barrier, accuracy) when out_dir is given. Decoupled weight decay, constant
    learning rate, gradient clipping at a global norm.
    """
    objective = objective or ObjectiveConfig()
    augment = augment if augment is not None else AugmentConfig()
    torch.manual_seed(cfg.seed)
    model = MatchingModel(cfg.model_config(len(vocab), **(model_overrides or {})))
    if cfg.freeze != "none":
        model.freeze_encoders(cfg.freeze)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(
        trainable, lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    examples = enumerate_segments(scenes, cfg)
    if not examples:
        raise ValueError("no trainable segments in the dataset")
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    cache = ClipCache(capacity=4)

    out_path = Path(out_dir) if out_dir is not None else None
    writer = None
    csv_file = None
    metrics_path = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_path = out_path / "metrics.csv"
        csv_file = open(metrics_path, "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(["step", "total", "focal", "barrier", "accuracy"])

    by_scene: Dict[int, List[int]] = {}
    for i, ex in enumerate(examples):
        by_scene.setdefault(ex.scene_index, []).append(i)

    def epoch_order() -> np.ndarray:
        # scenes shuffled, segments shuffled within each scene: consecutive
        # batch entries then share windows, so frame encoding is reused
        chunks = []
        for si in rng.permutation(sorted(by_scene)):
            idx = np.array(by_scene[si])
            chunks.append(idx[rng.permutation(len(idx))])
        return np.concatenate(chunks)

    history: List[Dict[str, float]] = []
    step = 0
    done = False
    epoch = 0
    try:
        while not done:
            if cfg.max_steps is None and epoch >= cfg.epochs:
                break
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            order = epoch_order()
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                batch = collate_batch(scenes, [examples[i] for i in idx], cfg, cache, rng)
                model.train()
                loss, parts = compute_loss(model, batch, objective, augment, gen)
                if not math.isfinite(parts["total"]):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step}: {parts}; "
                        f"segments={[(examples[i].scene_index, examples[i].segment.target_id, examples[i].segment.start_frame) for i in idx]}"
                    )
                optimizer.zero_grad()
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
                optimizer.step()
                step += 1
                parts["step"] = step
                history.append(parts)
                if writer is not None:
                    writer.writerow(
                        [step, parts["total"], parts["focal"], parts["barrier"], parts["accuracy"]]
                    )
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    done = True
                    break
            if log is not None:
                recent = history[-max(1, len(examples) // cfg.batch_size) :]
                log(
                    f"epoch {epoch + 1}/{cfg.epochs} step {step} "
                    f"loss {np.mean([h['total'] for h in recent]):.4f} "
                    f"acc {np.mean([h['accuracy'] for h in recent]):.3f}"
                )
            if out_path is not None:
                save_checkpoint(
                    out_path / f"checkpoint_epoch{epoch + 1:03d}.pt",
                    model,
                    vocab,
                    extra={"epoch": epoch + 1, "step": step, "train_config": _config_dict(cfg)},
                )
            epoch += 1
    finally:
        if csv_file is not None:
            csv_file.close()

    checkpoint_path = None
    if out_path is not None:
        checkpoint_path = out_path / "checkpoint.pt"
        save_checkpoint(
            checkpoint_path,
            model,
            vocab,
            extra={
                "epoch": cfg.epochs,
                "step": step,
                "train_config": _config_dict(cfg),
                "frozen_parameters": model.frozen_parameter_count(),
            },
        )
    model.eval()
    return TrainResult(
        model=model,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        history=history,
    )


def _config_dict(cfg: TrainConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)
