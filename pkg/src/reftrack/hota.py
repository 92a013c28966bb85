"""Higher Order Tracking Accuracy at desk scale.

Follows the published HOTA procedure: a global two-pass association (the
first pass accumulates similarity-weighted potential matches, the second
matches per frame by Hungarian assignment on global alignment x IoU), with
detection and association scores averaged over localization thresholds
0.05 .. 0.95. Validated against hand-enumerated micro-cases, not against
reference evaluators at benchmark scale.
"""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BoundingBox, TrajectorySet

LOC_THRESHOLDS = np.arange(0.05, 0.96, 0.05)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    x1 = max(a.x0, b.x0)
    y1 = max(a.y0, b.y0)
    x2 = min(a.x0 + a.w, b.x0 + b.w)
    y2 = min(a.y0 + a.h, b.y0 + b.h)
    inter = max(0.0, x2 - x1) * max(0.0, y2 - y1)
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def _per_frame(tracks: TrajectorySet) -> Dict[int, List[Tuple[int, BoundingBox]]]:
    frames: Dict[int, List[Tuple[int, BoundingBox]]] = {}
    for traj in tracks.trajectories:
        for f, box in traj.boxes.items():
            frames.setdefault(f, []).append((traj.target_id, box))
    return frames


def hota(pred: TrajectorySet, gt: TrajectorySet) -> Dict[str, float]:
    """HOTA / DetA / AssA for one expression's predicted vs true tracks.

    Both sets must use the same frame indexing. The empty-vs-empty case
    scores 1.0 by convention; empty ground truth against any prediction
    scores 0.
    """
    gt_frames = _per_frame(gt)
    pred_frames = _per_frame(pred)
    n_gt_dets = sum(len(v) for v in gt_frames.values())
    n_pred_dets = sum(len(v) for v in pred_frames.values())
    if n_gt_dets == 0 and n_pred_dets == 0:
        return {"HOTA": 1.0, "DetA": 1.0, "AssA": 1.0}
    gt_ids = sorted({t.target_id for t in gt.trajectories})
    pred_ids = sorted({t.target_id for t in pred.trajectories})
    gi = {g: i for i, g in enumerate(gt_ids)}
    pi = {p_: i for i, p_ in enumerate(pred_ids)}
    n_g, n_p = max(len(gt_ids), 1), max(len(pred_ids), 1)

    all_frames = sorted(set(gt_frames) | set(pred_frames))
    sims: Dict[int, np.ndarray] = {}
    potential = np.zeros((n_g, n_p))
    gt_count = np.zeros((n_g, 1))
    pred_count = np.zeros((1, n_p))
    for f in all_frames:
        g_list = gt_frames.get(f, [])
        p_list = pred_frames.get(f, [])
        sim = np.array(
            [[box_iou(gb, pb) for _, pb in p_list] for _, gb in g_list]
        ).reshape(len(g_list), len(p_list))
        sims[f] = sim
        if len(g_list) and len(p_list):
            denom = sim.sum(0)[None, :] + sim.sum(1)[:, None] - sim
            sim_iou = np.divide(sim, denom, out=np.zeros_like(sim), where=denom > 1e-12)
            rows = np.array([gi[g] for g, _ in g_list])
            cols = np.array([pi[p_] for p_, _ in p_list])
            potential[rows[:, None], cols[None, :]] += sim_iou
        for g, _ in g_list:
            gt_count[gi[g], 0] += 1
        for p_, _ in p_list:
            pred_count[0, pi[p_]] += 1

    alignment = potential / np.maximum(gt_count + pred_count - potential, 1e-12)

    n_thr = len(LOC_THRESHOLDS)
    tp = np.zeros(n_thr)
    fn = np.zeros(n_thr)
    fp = np.zeros(n_thr)
    matches = [np.zeros((n_g, n_p)) for _ in range(n_thr)]
    eps = np.finfo(float).eps
    for f in all_frames:
        g_list = gt_frames.get(f, [])
        p_list = pred_frames.get(f, [])
        if not g_list:
            fp += len(p_list)
            continue
        if not p_list:
            fn += len(g_list)
            continue
        sim = sims[f]
        rows = np.array([gi[g] for g, _ in g_list])
        cols = np.array([pi[p_] for p_, _ in p_list])
        score = alignment[rows[:, None], cols[None, :]] * sim
        mr, mc = linear_sum_assignment(-score)
        for a, alpha in enumerate(LOC_THRESHOLDS):
            ok = sim[mr, mc] >= alpha - eps
            n_match = int(ok.sum())
            tp[a] += n_match
            fn[a] += len(g_list) - n_match
            fp[a] += len(p_list) - n_match
            matches[a][rows[mr[ok]], cols[mc[ok]]] += 1

    det_a = tp / np.maximum(tp + fn + fp, 1.0)
    ass_a = np.zeros(n_thr)
    for a in range(n_thr):
        pair_ass = matches[a] / np.maximum(gt_count + pred_count - matches[a], 1.0)
        ass_a[a] = (matches[a] * pair_ass).sum() / max(tp[a], 1.0)
    hota_a = np.sqrt(det_a * ass_a)
    return {
        "HOTA": float(hota_a.mean()),
        "DetA": float(det_a.mean()),
        "AssA": float(ass_a.mean()),
    }


def referred_ground_truth(
    tracks: TrajectorySet, relation, expr_id: int
) -> TrajectorySet:
    """Restrict trajectories to the frame ranges the expression refers to."""
    from .core import Trajectory

    kept = []
    for traj in tracks.trajectories:
        boxes = {}
        for r in relation.records_for(expr_id, traj.target_id):
            for f, box in traj.boxes.items():
                if r.frame_start <= f <= r.frame_end:
                    boxes[f] = box
        if boxes:
            kept.append(Trajectory(target_id=traj.target_id, boxes=boxes))
    return TrajectorySet(video_id=tracks.video_id, trajectories=tuple(kept))
