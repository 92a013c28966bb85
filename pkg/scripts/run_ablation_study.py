#!/usr/bin/env python3
"""Train the model variants across seeds and print the AUC ordering table.

Compares the full model against the mean-pooling variant (no displacement
fusion), the cosine-similarity variant (no pairwise decoder) and the
no-reference-points variant (M = 0) on a shared held-out split.

Usage:
    python scripts/run_ablation_study.py --out /tmp/ablation [--seeds 3]
        [--train-scenes 48] [--held-scenes 24] [--steps 260]
"""

import argparse
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from reftrack.datasets import load_scenes
from reftrack.evaluation import pair_metrics_from_arrays, score_all
from reftrack.core import segment_label
from reftrack.synthdata import SceneConfig, generate_scene, grammar_vocabulary, write_scene
from reftrack.training import TrainConfig, train

VARIANTS = ("full", "no_ti", "no_pcd", "no_conditioning")


def make_scenes(root: Path, n: int, seed0: int, vocab, n_frames=4):
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        cfg = SceneConfig(seed=seed0 + i, n_frames=n_frames)
        clip, tracks, exprs, rel, _ = generate_scene(cfg, vocab, video_id=f"s{seed0 + i}")
        write_scene(root / f"scene_{i:04d}", clip, tracks, exprs, rel)


def held_out_auc(model, scenes, stride, n_slots):
    probs, labels = [], []
    for sc in scenes:
        table = score_all(model, sc.load_clip(), sc.tracks, sc.expressions, stride, n_slots)
        for (eid, tid, start), pr in table.scores.items():
            probs.append(pr)
            labels.append(segment_label(sc.relation, table.segments[(tid, start)], eid))
    return pair_metrics_from_arrays(probs, labels)["auc"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=None)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--train-scenes", type=int, default=48)
    ap.add_argument("--held-scenes", type=int, default=24)
    ap.add_argument("--steps", type=int, default=260)
    args = ap.parse_args()

    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="ablation-"))
    vocab = grammar_vocabulary()
    print(f"generating {args.train_scenes}+{args.held_scenes} scenes under {out}")
    make_scenes(out / "train", args.train_scenes, 3000, vocab)
    make_scenes(out / "held", args.held_scenes, 9000, vocab)
    train_scenes = load_scenes(out / "train", vocab, 25)
    held = load_scenes(out / "held", vocab, 25)

    results = {v: [] for v in VARIANTS}
    for seed in range(args.seeds):
        for variant in VARIANTS:
            cfg = TrainConfig(
                variant=variant, seed=seed, batch_size=9,
                learning_rate=3e-4, max_steps=args.steps,
            )
            t0 = time.time()
            res = train(train_scenes, vocab, cfg)
            auc = held_out_auc(res.model, held, cfg.window_stride, cfg.n_expressions)
            results[variant].append(auc)
            print(
                f"seed {seed} {variant:16s} AUC {auc:.4f} ({time.time() - t0:.0f}s)",
                flush=True,
            )

    print("\nmean AUC over seeds:")
    for v in VARIANTS:
        vals = results[v]
        print(f"  {v:16s} {np.mean(vals):.4f}  (runs: {[f'{x:.4f}' for x in vals]})")
    (out / "results.json").write_text(json.dumps(results, indent=1))
    print(f"results written to {out / 'results.json'}")


if __name__ == "__main__":
    main()
