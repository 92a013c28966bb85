#!/usr/bin/env python3
"""Memorization sanity check: 8 segments must reach pair accuracy 1.0 fast.

If this fails, gradients are not flowing somewhere. Runs in a couple of
minutes on CPU.
"""

import argparse
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from reftrack.datasets import ClipCache, load_scenes
from reftrack.losses import ObjectiveConfig
from reftrack.model import MatchingModel
from reftrack.sampling import AugmentConfig
from reftrack.synthdata import SceneConfig, generate_scene, grammar_vocabulary, write_scene
from reftrack.training import TrainConfig, collate_batch, compute_loss, enumerate_segments


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--segments", type=int, default=8)
    args = ap.parse_args()

    root = Path(tempfile.mkdtemp(prefix="overfit-"))
    vocab = grammar_vocabulary()
    for i in range(3):
        cfg = SceneConfig(seed=500 + i, n_frames=4)
        clip, tracks, exprs, rel, _ = generate_scene(cfg, vocab, video_id=f"s{i}")
        write_scene(root / f"scene_{i:04d}", clip, tracks, exprs, rel)
    scenes = load_scenes(root, vocab, 25)

    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.segments, seed=0)
    torch.manual_seed(0)
    model = MatchingModel(cfg.model_config(len(vocab)))
    examples = enumerate_segments(scenes, cfg)[: args.segments]
    batch = collate_batch(scenes, examples, cfg, ClipCache(), np.random.default_rng(0))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)
    obj, aug = ObjectiveConfig(), AugmentConfig(enabled=False)

    t0 = time.time()
    for step in range(1, args.steps + 1):
        loss, parts = compute_loss(model, batch, obj, aug, None)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        if step % 20 == 0:
            print(f"step {step:4d}  loss {parts['total']:.5f}  "
                  f"acc {parts['accuracy']:.4f}", flush=True)
        if parts["accuracy"] == 1.0:
            print(f"memorized at step {step} ({time.time() - t0:.0f}s)")
            return 0
    print(f"NOT memorized within {args.steps} steps (final acc {parts['accuracy']:.4f})")
    return 1


if __name__ == "__main__":
    sys.exit(main())
