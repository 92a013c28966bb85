"""Inference assembly and metrics.

Scoring slides fixed-length windows over every trajectory and asks the model
for a match probability per (expression, window). Frame-level tracks are then
assembled by aggregating the probabilities of all windows covering a frame.
Pair-level classification metrics and a rank-based ROC-AUC summarize the
referring subtask on its own; HOTA (see hota.py) scores the assembled tracks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .core import (
    Expression,
    MatchingRelation,
    Trajectory,
    TrajectorySegment,
    TrajectorySet,
    VideoClip,
    segment_label,
    window_segments,
)

ScoreKey = Tuple[int, int, int]  # (expr_id, target_id, window_start)


@dataclass
class ScoreTable:
    """Match probabilities per (expression, target, window) plus the scored
    segments, so labels can be derived later."""

    scores: Dict[ScoreKey, float] = field(default_factory=dict)
    segments: Dict[Tuple[int, int], TrajectorySegment] = field(default_factory=dict)

    def update(self, other: "ScoreTable") -> None:
        self.scores.update(other.scores)
        self.segments.update(other.segments)


def _frames_to_tensor(clip: VideoClip, start: int, p: int) -> torch.Tensor:
    stack = np.stack([clip.frames[start + i] for i in range(p)])
    return torch.from_numpy(stack).float().div_(255.0)


def score_all(
    model,
    clip: VideoClip,
    tracks: TrajectorySet,
    expressions: Sequence[Expression],
    window_stride: int,
    n_slots: int = 36,
) -> ScoreTable:
    """Score every (expression, trajectory window) pair of one video.

    Windows come from window_segments. Expressions are chunked into groups of
    at most ``n_slots`` per forward pass; short groups are padded by repeating
    expressions and the padded slots' outputs discarded. Window frames are
    encoded once and reused across the trajectories sharing that window.
    """
    p = model.cfg.segment_length
    table = ScoreTable()
    if not expressions or len(tracks) == 0:
        return table
    by_start: Dict[int, List[TrajectorySegment]] = {}
    for traj in tracks.trajectories:
        for seg in window_segments(traj, p, window_stride):
            if seg.start_frame + p <= clip.frame_count:
                by_start.setdefault(seg.start_frame, []).append(seg)

    chunks: List[List[Expression]] = [
        list(expressions[i : i + n_slots]) for i in range(0, len(expressions), n_slots)
    ]
    model.eval()
    with torch.no_grad():
        for start in sorted(by_start):
            frames = _frames_to_tensor(clip, start, p).unsqueeze(0)
            pyramid = model.encode_frames(frames)
            for seg in by_start[start]:
                boxes = torch.from_numpy(seg.box_array()).float().unsqueeze(0)
                present = torch.tensor([seg.present], dtype=torch.bool)
                for chunk in chunks:
                    padded = list(chunk)
                    while len(padded) < n_slots:
                        padded.append(chunk[len(padded) % len(chunk)])
                    tokens = torch.tensor([[e.tokens for e in padded]], dtype=torch.long)
                    pads = torch.tensor([[e.pad_mask for e in padded]], dtype=torch.bool)
                    out = model.decode(pyramid, boxes, present, tokens, pads)
                    probs = out.probabilities[0]
                    for k, expr in enumerate(chunk):
                        table.scores[(expr.expr_id, seg.target_id, start)] = float(
                            probs[k]
                        )
                table.segments[(seg.target_id, start)] = seg
    return table


ReferredTrackSet = Dict[int, TrajectorySet]


def assemble_tracks(
    table: ScoreTable,
    tracks: TrajectorySet,
    expressions: Sequence[Expression],
    p: int,
    threshold: float = 0.5,
    aggregation: str = "mean",
) -> ReferredTrackSet:
    """Turn window scores into per-expression frame-level tracks.

    A trajectory frame is retained for an expression iff the aggregate
    (mean by default, max optional) of all windows covering that frame
    reaches the threshold.
    """
    if aggregation not in ("mean", "max"):
        raise ValueError("aggregation must be 'mean' or 'max'")
    out: ReferredTrackSet = {}
    for expr in expressions:
        kept: List[Trajectory] = []
        for traj in tracks.trajectories:
            starts = [
                (k[2], v)
                for k, v in table.scores.items()
                if k[0] == expr.expr_id and k[1] == traj.target_id
            ]
            boxes = {}
            for f, box in traj.boxes.items():
                covering = [v for s, v in starts if s <= f <= s + p - 1]
                if not covering:
                    continue
                agg = max(covering) if aggregation == "max" else sum(covering) / len(covering)
                if agg >= threshold:
                    boxes[f] = box
            if boxes:
                kept.append(Trajectory(target_id=traj.target_id, boxes=boxes))
        out[expr.expr_id] = TrajectorySet(
            video_id=tracks.video_id, trajectories=tuple(kept)
        )
    return out


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """Rank-statistic AUC with midrank tie handling.

    Returns None when only one class is present (AUC undefined).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # midrank, 1-based
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pair_metrics(
    table: ScoreTable,
    relation: MatchingRelation,
    threshold: float = 0.5,
) -> dict:
    """Segment-level classification metrics against the ground-truth relation.

    AUC is reported as None (undefined) when all scored segments share one
    label. f1 refers to the match class; f1_macro averages both classes.
    """
    probs, labels = [], []
    for (expr_id, target_id, start), prob in table.scores.items():
        seg = table.segments[(target_id, start)]
        probs.append(prob)
        labels.append(segment_label(relation, seg, expr_id))
    return pair_metrics_from_arrays(probs, labels, threshold)


def pair_metrics_from_arrays(
    probs: Sequence[float], labels: Sequence[int], threshold: float = 0.5
) -> dict:
    probs_a = np.asarray(probs, dtype=np.float64)
    labels_a = np.asarray(labels, dtype=np.int64)
    pred = (probs_a >= threshold).astype(np.int64)
    tp = int(((pred == 1) & (labels_a == 1)).sum())
    fp = int(((pred == 1) & (labels_a == 0)).sum())
    fn = int(((pred == 0) & (labels_a == 1)).sum())
    tn = int(((pred == 0) & (labels_a == 0)).sum())

    def f1(tp_, fp_, fn_):
        denom = 2 * tp_ + fp_ + fn_
        return 2 * tp_ / denom if denom else 0.0

    n = len(labels_a)
    f1_pos = f1(tp, fp, fn)
    f1_neg = f1(tn, fn, fp)
    return {
        "n_pairs": n,
        "accuracy": (tp + tn) / n if n else 0.0,
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / (tp + fn) if tp + fn else 0.0,
        "f1": f1_pos,
        "f1_macro": (f1_pos + f1_neg) / 2.0,
        "auc": roc_auc(probs_a, labels_a),
    }


def cosine_baseline(
    trajectory_vector: torch.Tensor, text_vectors: torch.Tensor
) -> torch.Tensor:
    """Mapped cosine similarity per pair.

    trajectory_vector: [..., C] (trajectory features pooled over space);
    text_vectors: [..., N, C] (tokens mean-pooled over non-pad positions).
    Returns [..., N] scores in [0, 1]: identical directions give 1,
    orthogonal 0.5, opposite 0. A zero-norm vector's similarity is 0 by
    definition (score 0.5).
    """
    a = trajectory_vector.unsqueeze(-2)
    dot = (a * text_vectors).sum(dim=-1)
    denom = a.norm(dim=-1) * text_vectors.norm(dim=-1)
    cos = torch.where(denom > 0, dot / denom.clamp(min=1e-30), torch.zeros_like(dot))
    return 0.5 * (cos + 1.0)


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1, default=float))


def evaluate_scenes(
    model,
    scenes,
    window_stride: int,
    n_slots: int = 36,
    threshold: float = 0.5,
    aggregation: str = "mean",
    clip_loader=None,
) -> dict:
    """Full evaluation over scene bundles: pooled pair metrics plus
    per-expression HOTA of the assembled tracks against the ground-truth
    referred tracks."""
    from .hota import hota, referred_ground_truth

    pooled = ScoreTable()
    probs: List[float] = []
    labels: List[int] = []
    per_scene: Dict[str, dict] = {}
    hotas, detas, assas = [], [], []
    p = model.cfg.segment_length
    for scene in scenes:
        clip = clip_loader(scene) if clip_loader else scene.load_clip()
        table = score_all(
            model, clip, scene.tracks, scene.expressions, window_stride, n_slots
        )
        for (expr_id, target_id, start), prob in table.scores.items():
            seg = table.segments[(target_id, start)]
            probs.append(prob)
            labels.append(segment_label(scene.relation, seg, expr_id))
        pooled.update(table)
        referred = assemble_tracks(
            table, scene.tracks, scene.expressions, p, threshold, aggregation
        )
        expr_scores = {}
        for expr in scene.expressions:
            gt = referred_ground_truth(scene.tracks, scene.relation, expr.expr_id)
            scores = hota(referred[expr.expr_id], gt)
            expr_scores[str(expr.expr_id)] = scores
            hotas.append(scores["HOTA"])
            detas.append(scores["DetA"])
            assas.append(scores["AssA"])
        per_scene[scene.video_id] = expr_scores
    return {
        "pair_metrics": pair_metrics_from_arrays(probs, labels, threshold),
        "macro": {
            "HOTA": float(np.mean(hotas)) if hotas else None,
            "DetA": float(np.mean(detas)) if detas else None,
            "AssA": float(np.mean(assas)) if assas else None,
        },
        "per_scene": per_scene,
    }
