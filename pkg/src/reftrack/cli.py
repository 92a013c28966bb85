"""Command-line entry points.

    reftrack synth-data --out DIR --scenes N --seed S [--objects K --frames T]
    reftrack train      --config FILE --data DIR --out DIR [--freeze ...]
    reftrack eval       --checkpoint FILE --data DIR --report FILE
                        [--baseline cosine] [--ablate no-ti|no-pcd|no-conditioning]
    reftrack infer      --checkpoint FILE --frames DIR --tracks FILE
                        --expressions FILE --out DIR

All hyperparameters live in the JSON config file (see config.py); flags
override. REFTRACK_CONFIG names a default config path. Exit code is 0 iff no
error; warnings are printed but never change the exit code.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import datasets, evaluation, synthdata
from .config import ConfigError, RunConfig, default_run_config, load_run_config, save_run_config
from .core import VideoClip
from .ingest import ParseWarnings, Vocabulary, parse_expressions, parse_tracker_file, write_tracker_file
from .model import CheckpointError, MatchingModel, load_checkpoint
from .training import train

DEFAULT_SEGMENT_LENGTH = 4


class CliError(RuntimeError):
    pass


def _ensure_out_dir(path: Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_synth_data(args) -> int:
    out = _ensure_out_dir(Path(args.out), args.force)
    if args.frames < DEFAULT_SEGMENT_LENGTH:
        print(
            f"warning: scenes have {args.frames} frames, fewer than the default "
            f"segment length {DEFAULT_SEGMENT_LENGTH}; downstream windowing will "
            f"produce no segments",
            file=sys.stderr,
        )
    vocab = synthdata.grammar_vocabulary()
    manifest = {"seed": args.seed, "scenes": [], "image_size": [224, 672]}
    for i in range(args.scenes):
        cfg = synthdata.SceneConfig(
            n_objects=args.objects,
            n_frames=args.frames,
            seed=args.seed + i,
            n_expressions=args.expressions,
        )
        name = f"scene_{i:04d}"
        clip, tracks, expressions, relation, _ = synthdata.generate_scene(
            cfg, vocab, video_id=name
        )
        synthdata.write_scene(out / name, clip, tracks, expressions, relation)
        manifest["scenes"].append(
            {
                "name": name,
                "seed": cfg.seed,
                "objects": len(tracks),
                "frames": clip.frame_count,
                "expressions": len(expressions),
            }
        )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    print(f"wrote {args.scenes} scenes to {out}")
    for entry in manifest["scenes"]:
        print(
            f"  {entry['name']}: {entry['objects']} objects, "
            f"{entry['frames']} frames, {entry['expressions']} expressions"
        )
    return 0


def _load_config(args) -> RunConfig:
    path = args.config or os.environ.get("REFTRACK_CONFIG")
    if path is None:
        raise CliError("no config file: pass --config or set REFTRACK_CONFIG")
    return load_run_config(path)


def cmd_train(args) -> int:
    run_cfg = _load_config(args)
    train_cfg = run_cfg.train
    if args.freeze is not None:
        train_cfg = replace(train_cfg, freeze=args.freeze)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    out = _ensure_out_dir(Path(args.out), args.force)
    texts = datasets.read_expression_texts(args.data)
    if not texts:
        raise CliError(f"no expressions found under {args.data}")
    vocab = Vocabulary.build(texts)
    scenes = datasets.load_scenes(
        args.data, vocab, train_cfg.max_text_len, train_cfg.image_size
    )
    print(f"training on {len(scenes)} scenes ({len(vocab)} vocabulary words)")
    result = train(
        scenes,
        vocab,
        train_cfg,
        objective=run_cfg.objective,
        augment=run_cfg.augment,
        out_dir=out,
        log=print,
    )
    frozen = result.model.frozen_parameter_count()
    print(f"frozen parameters: {frozen}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics log: {result.metrics_path}")
    return 0


def _model_as_variant(model: MatchingModel, variant: str) -> MatchingModel:
    """Re-instantiate a checkpointed model with one mechanism disabled.

    Weights whose modules survive in the ablated architecture are copied
    over; modules the variant removes (fusers, pair decoders, reference
    decoder) are simply dropped.
    """
    if variant == model.cfg.variant:
        return model
    cfg = replace(model.cfg, variant=variant)
    ablated = MatchingModel(cfg)
    own = ablated.state_dict()
    source = {k: v for k, v in model.state_dict().items() if k in own and own[k].shape == v.shape}
    own.update(source)
    ablated.load_state_dict(own)
    ablated.eval()
    return ablated


def cmd_eval(args) -> int:
    model, vocab, extra = load_checkpoint(args.checkpoint)
    train_conf = extra.get("train_config", {})
    n_slots = int(train_conf.get("n_expressions", 36))
    stride = int(train_conf.get("window_stride", model.cfg.segment_length))
    ablate = None
    if args.ablate:
        ablate = args.ablate.replace("-", "_")
        model = _model_as_variant(model, ablate)
    scenes = datasets.load_scenes(
        args.data, vocab, model.cfg.max_text_len, model.cfg.image_size
    )
    if not scenes:
        raise CliError(f"no scenes under {args.data}")
    report = evaluation.evaluate_scenes(
        model, scenes, window_stride=stride, n_slots=n_slots, threshold=args.threshold
    )
    report["config"] = {
        "checkpoint": str(args.checkpoint),
        "variant": model.cfg.variant,
        "trajectory_fusion": "displacement_mlp" if model.fusers is not None else "mean_pooling",
        "reference_points": model.cfg.effective_ref_points,
        "threshold": args.threshold,
        "window_stride": stride,
        "ablate": ablate,
    }
    if args.baseline == "cosine":
        baseline_model = _model_as_variant(model, "no_pcd")
        report["baseline_cosine"] = evaluation.evaluate_scenes(
            baseline_model, scenes, window_stride=stride, n_slots=n_slots,
            threshold=args.threshold,
        )
    evaluation.write_report(args.report, report)
    pm = report["pair_metrics"]
    auc = "undefined" if pm["auc"] is None else f"{pm['auc']:.4f}"
    print(f"pairs: {pm['n_pairs']}  acc {pm['accuracy']:.4f}  f1 {pm['f1']:.4f}  auc {auc}")
    macro = report["macro"]
    if macro["HOTA"] is not None:
        print(
            f"macro HOTA {macro['HOTA']:.4f}  DetA {macro['DetA']:.4f}  "
            f"AssA {macro['AssA']:.4f}"
        )
    print(f"report: {args.report}")
    return 0


def cmd_infer(args) -> int:
    model, vocab, extra = load_checkpoint(args.checkpoint)
    train_conf = extra.get("train_config", {})
    n_slots = int(train_conf.get("n_expressions", 36))
    stride = int(train_conf.get("window_stride", model.cfg.segment_length))
    out = _ensure_out_dir(Path(args.out), args.force)

    frame_paths = sorted(Path(args.frames).glob("*.png"))
    if not frame_paths:
        raise CliError(f"no frames (*.png) under {args.frames}")
    frames = tuple(datasets._decode_frame(p) for p in frame_paths)
    clip = VideoClip(video_id=Path(args.tracks).stem, frames=frames)
    warnings = ParseWarnings()
    tracks = parse_tracker_file(
        args.tracks, image_size=model.cfg.image_size, warnings=warnings
    )
    if warnings.total():
        print(f"warning: tracker file irregularities: {warnings}", file=sys.stderr)
    last_frame = max((t.last_frame for t in tracks.trajectories), default=-1)
    if last_frame >= clip.frame_count:
        raise CliError(
            f"tracker file references frame {last_frame} but only "
            f"{clip.frame_count} frames were provided"
        )
    expressions, _ = parse_expressions(args.expressions, vocab, model.cfg.max_text_len)

    table = evaluation.score_all(model, clip, tracks, expressions, stride, n_slots)
    referred = evaluation.assemble_tracks(
        table, tracks, expressions, model.cfg.segment_length, args.threshold
    )
    summary = {}
    for expr in expressions:
        path = out / f"expr_{expr.expr_id:04d}.csv"
        write_tracker_file(path, referred[expr.expr_id])
        n_boxes = sum(len(t.boxes) for t in referred[expr.expr_id].trajectories)
        summary[expr.expr_id] = {"text": expr.text, "file": path.name, "boxes": n_boxes}
        print(f"expr {expr.expr_id} ({expr.text!r}): {n_boxes} boxes -> {path.name}")
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reftrack",
        description="Score and assemble language-referred tracks from tracker output",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate synthetic scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--expressions", type=int, default=10)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a matching model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--freeze", choices=("visual", "text", "both", "none"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on annotated scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--baseline", choices=("cosine",), default=None)
    p.add_argument("--ablate", choices=("no-ti", "no-pcd", "no-conditioning"), default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="score tracker output against expressions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--tracks", required=True)
    p.add_argument("--expressions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("init-config", help="write a default config file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_config)
    return parser


def cmd_init_config(args) -> int:
    save_run_config(args.out, default_run_config())
    print(f"wrote default config to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
