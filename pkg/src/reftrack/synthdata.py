"""Synthetic scenes: solid colored rectangles in straight-line motion, plus a
closed expression grammar and an exact oracle that labels which frame ranges
each expression refers to. End-to-end learning can then be verified without
any external dataset.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .core import (
    BoundingBox,
    Expression,
    MatchingRelation,
    MatchRecord,
    Trajectory,
    TrajectorySet,
    VideoClip,
)
from .ingest import Vocabulary, tokenize, write_expressions, write_tracker_file

PALETTE: Dict[str, Tuple[int, int, int]] = {
    "red": (205, 40, 40),
    "green": (40, 185, 60),
    "blue": (50, 95, 220),
    "yellow": (225, 205, 50),
}
BACKGROUND = (28, 28, 28)

MOTIONS = ("static", "left", "right", "up", "down")
SIZE_CLASSES = ("small", "large")

# displacement below this magnitude (px/frame) counts as not moving
MOTION_DEAD_ZONE = 0.5


class SceneGenerationError(RuntimeError):
    """Raised when no valid object placement exists for the config."""


@dataclass(frozen=True)
class SceneConfig:
    n_objects: int = 3
    n_frames: int = 8
    image_size: Tuple[int, int] = (224, 672)  # (H, W)
    colors: Tuple[str, ...] = tuple(PALETTE)
    seed: int = 0
    n_expressions: int = 10
    min_speed: float = 1.5
    max_speed: float = 4.0
    placement_attempts: int = 200

    def __post_init__(self):
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")


@dataclass(frozen=True)
class ObjectTruth:
    """Per-object generation ground truth the oracle evaluates against."""

    target_id: int
    color: str
    motion: str
    size_class: str
    velocity: Tuple[float, float]


@dataclass(frozen=True)
class SceneTruth:
    objects: Tuple[ObjectTruth, ...]
    image_size: Tuple[int, int]

    def by_id(self, target_id: int) -> ObjectTruth:
        for o in self.objects:
            if o.target_id == target_id:
                return o
        raise KeyError(target_id)


@dataclass(frozen=True)
class ExpressionTemplate:
    """A predicate over (object, frame) with its rendered text.

    kind is one of color / motion / region / conjunction. For conjunction,
    ``parts`` holds exactly two non-conjunction templates.
    """

    kind: str
    value: str = ""
    parts: Tuple["ExpressionTemplate", ...] = ()

    def render(self) -> str:
        if self.kind == "color":
            return f"the {self.value} object"
        if self.kind == "motion":
            if self.value == "static":
                return "the object standing still"
            return f"the object moving {self.value}"
        if self.kind == "region":
            return f"the object on the {self.value} half"
        if self.kind == "conjunction":
            a, b = self.parts
            if a.kind == "color" and b.kind == "motion":
                if b.value == "static":
                    return f"the {a.value} object standing still"
                return f"the {a.value} object moving {b.value}"
            return f"{a.render()} {b.render()}"
        raise ValueError(self.kind)


def grammar_vocabulary() -> Vocabulary:
    """Vocabulary over every word the template grammar can emit."""
    texts = []
    for c in PALETTE:
        texts.append(ExpressionTemplate("color", c).render())
    for m in MOTIONS:
        texts.append(ExpressionTemplate("motion", m).render())
    for r in ("left", "right"):
        texts.append(ExpressionTemplate("region", r).render())
    return Vocabulary.build(texts)


def _centers(trajectory: Trajectory) -> Tuple[List[int], np.ndarray]:
    frames = trajectory.frames
    pts = np.array([trajectory.boxes[f].center for f in frames], dtype=np.float64)
    return frames, pts


def _per_frame_velocity(frames: List[int], centers: np.ndarray) -> np.ndarray:
    """Center displacement per frame; the last frame reuses the previous one."""
    if len(frames) == 1:
        return np.zeros((1, 2))
    diffs = np.diff(centers, axis=0) / np.diff(np.array(frames, float))[:, None]
    return np.vstack([diffs, diffs[-1:]])


def _holds(
    template: ExpressionTemplate,
    trajectory: Trajectory,
    truth: SceneTruth,
) -> np.ndarray:
    """Boolean predicate per present frame of the trajectory."""
    frames, centers = _centers(trajectory)
    if template.kind == "color":
        obj = truth.by_id(trajectory.target_id)
        return np.full(len(frames), obj.color == template.value)
    if template.kind == "motion":
        v = _per_frame_velocity(frames, centers)
        dx, dy = v[:, 0], v[:, 1]
        dz = MOTION_DEAD_ZONE
        if template.value == "left":
            return dx < -dz
        if template.value == "right":
            return dx > dz
        if template.value == "up":
            return dy < -dz
        if template.value == "down":
            return dy > dz
        if template.value == "static":
            return (np.abs(dx) <= dz) & (np.abs(dy) <= dz)
        raise ValueError(template.value)
    if template.kind == "region":
        mid = truth.image_size[1] / 2.0
        if template.value == "left":
            return centers[:, 0] < mid
        if template.value == "right":
            return centers[:, 0] > mid
        raise ValueError(template.value)
    if template.kind == "conjunction":
        a, b = template.parts
        return _holds(a, trajectory, truth) & _holds(b, trajectory, truth)
    raise ValueError(template.kind)


def evaluate_oracle(
    template: ExpressionTemplate,
    trajectory: Trajectory,
    truth: SceneTruth,
) -> List[Tuple[int, int]]:
    """Maximal frame ranges on which the predicate holds.

    Ranges never span a gap in the trajectory, so extending any returned
    range by one frame either breaks the predicate or leaves the trajectory.
    """
    frames = trajectory.frames
    flags = _holds(template, trajectory, truth)
    ranges: List[Tuple[int, int]] = []
    start: Optional[int] = None
    prev = None
    for f, ok in zip(frames, flags):
        contiguous = prev is not None and f == prev + 1
        if ok and start is not None and contiguous:
            pass  # range continues
        elif ok:
            if start is not None:
                ranges.append((start, prev))
            start = f
        elif start is not None:
            ranges.append((start, prev))
            start = None
        prev = f
    if start is not None:
        ranges.append((start, prev))
    return ranges


def _boxes_overlap(a: Tuple[float, float, float, float], b, margin: float = 4.0):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return not (
        ax + aw + margin <= bx
        or bx + bw + margin <= ax
        or ay + ah + margin <= by
        or by + bh + margin <= ay
    )


def _place_objects(cfg: SceneConfig, rng: np.random.Generator) -> List[dict]:
    """Choose sizes, colors, motions and non-overlapping linear paths."""
    img_h, img_w = cfg.image_size
    horizon = cfg.n_frames - 1
    placed: List[dict] = []
    unused_colors = list(cfg.colors)
    for i in range(cfg.n_objects):
        # colors stay distinct while the palette lasts, keeping color and
        # region expressions unambiguous in small scenes
        if unused_colors:
            color = unused_colors[int(rng.integers(0, len(unused_colors)))]
            unused_colors.remove(color)
        else:
            color = cfg.colors[int(rng.integers(0, len(cfg.colors)))]
        motion = MOTIONS[int(rng.integers(0, len(MOTIONS)))]
        size_class = SIZE_CLASSES[int(rng.integers(0, 2))]
        if size_class == "small":
            w = int(rng.integers(24, 40))
            h = int(rng.integers(16, 28))
        else:
            w = int(rng.integers(56, 88))
            h = int(rng.integers(36, 56))
        speed = float(rng.uniform(cfg.min_speed, cfg.max_speed))
        vx, vy = {
            "static": (0.0, 0.0),
            "left": (-speed, 0.0),
            "right": (speed, 0.0),
            "up": (0.0, -speed),
            "down": (0.0, speed),
        }[motion]
        for _ in range(cfg.placement_attempts):
            x_lo = max(0.0, -vx * horizon)
            x_hi = img_w - w - max(0.0, vx * horizon)
            y_lo = max(0.0, -vy * horizon)
            y_hi = img_h - h - max(0.0, vy * horizon)
            if x_hi <= x_lo or y_hi <= y_lo:
                continue
            x0 = float(rng.uniform(x_lo, x_hi))
            y0 = float(rng.uniform(y_lo, y_hi))
            candidate = dict(
                target_id=i + 1,
                color=color,
                motion=motion,
                size_class=size_class,
                velocity=(vx, vy),
                start=(x0, y0),
                size=(w, h),
            )
            ok = True
            for t in range(cfg.n_frames):
                ca = (x0 + vx * t, y0 + vy * t, w, h)
                for other in placed:
                    ox, oy = other["start"]
                    ovx, ovy = other["velocity"]
                    cb = (ox + ovx * t, oy + ovy * t, *other["size"])
                    if _boxes_overlap(ca, cb):
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                placed.append(candidate)
                break
        else:
            raise SceneGenerationError(
                f"could not place object {i + 1} of {cfg.n_objects}"
            )
    return placed


def _render(cfg: SceneConfig, placed: List[dict]) -> Tuple[np.ndarray, ...]:
    img_h, img_w = cfg.image_size
    # static horizontal brightness ramp: gives the otherwise translation-
    # invariant backbone an absolute-position cue, which region expressions
    # ("... on the left half") need to be learnable at all
    ramp = np.linspace(0.0, 60.0, img_w, dtype=np.float64)
    bg_row = np.clip(np.array(BACKGROUND, dtype=np.float64) + ramp[:, None], 0, 255)
    bg = np.broadcast_to(bg_row[None, :, :], (img_h, img_w, 3)).astype(np.uint8)
    frames = []
    for t in range(cfg.n_frames):
        img = bg.copy()
        for obj in placed:
            x0, y0 = obj["start"]
            vx, vy = obj["velocity"]
            w, h = obj["size"]
            xi = int(round(x0 + vx * t))
            yi = int(round(y0 + vy * t))
            xi, yi = max(xi, 0), max(yi, 0)
            x2, y2 = min(xi + w, img_w), min(yi + h, img_h)
            img[yi:y2, xi:x2] = PALETTE[obj["color"]]
        frames.append(np.ascontiguousarray(img.transpose(2, 0, 1)))
    return tuple(frames)


def _expression_kind(text: str) -> str:
    """Coarse expression class from its rendered text (for diagnostics)."""
    if "half" in text:
        return "region"
    has_color = any(c in text.split() for c in PALETTE)
    has_motion = "moving" in text or "standing" in text
    if has_color and has_motion:
        return "conjunction"
    if has_color:
        return "color"
    return "motion"


def _pick_templates(
    cfg: SceneConfig, placed: List[dict], rng: np.random.Generator
) -> List[ExpressionTemplate]:
    """Assemble the scene's expression set.

    Guarantees at least one template with a positive target (taken from a
    placed object's own attributes) and one with none (an absent attribute
    combination).
    """
    present_colors = {o["color"] for o in placed}
    present_motions = {o["motion"] for o in placed}
    absent_colors = [c for c in cfg.colors if c not in present_colors]
    absent_motions = [m for m in MOTIONS if m not in present_motions]

    templates: List[ExpressionTemplate] = []
    anchor = placed[int(rng.integers(0, len(placed)))]
    templates.append(ExpressionTemplate("color", anchor["color"]))
    if absent_colors:
        templates.append(ExpressionTemplate("color", absent_colors[0]))
    elif absent_motions:
        templates.append(ExpressionTemplate("motion", absent_motions[0]))
    else:
        # all colors and motions present: a conjunction no object satisfies
        other = next(
            (o for o in placed if o["motion"] != anchor["motion"]), placed[0]
        )
        templates.append(
            ExpressionTemplate(
                "conjunction",
                parts=(
                    ExpressionTemplate("color", anchor["color"]),
                    ExpressionTemplate("motion", other["motion"]),
                ),
            )
        )

    pool_weights = [("color", 0.3), ("motion", 0.35), ("region", 0.1), ("conj", 0.25)]
    kinds = [k for k, _ in pool_weights]
    probs = np.array([w for _, w in pool_weights])
    probs = probs / probs.sum()
    guard = 0
    while len(templates) < cfg.n_expressions and guard < 20 * cfg.n_expressions:
        guard += 1
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        if kind == "color":
            t = ExpressionTemplate("color", cfg.colors[int(rng.integers(0, len(cfg.colors)))])
        elif kind == "motion":
            t = ExpressionTemplate("motion", MOTIONS[int(rng.integers(0, len(MOTIONS)))])
        elif kind == "region":
            t = ExpressionTemplate("region", ("left", "right")[int(rng.integers(0, 2))])
        else:
            obj = placed[int(rng.integers(0, len(placed)))]
            # half the conjunctions describe a real object, half are mixed
            if rng.random() < 0.5:
                c, m = obj["color"], obj["motion"]
            else:
                c = cfg.colors[int(rng.integers(0, len(cfg.colors)))]
                m = MOTIONS[int(rng.integers(0, len(MOTIONS)))]
            t = ExpressionTemplate(
                "conjunction",
                parts=(ExpressionTemplate("color", c), ExpressionTemplate("motion", m)),
            )
        if t not in templates:
            templates.append(t)
    return templates


def generate_scene(
    cfg: SceneConfig,
    vocab: Optional[Vocabulary] = None,
    max_text_len: int = 25,
    video_id: Optional[str] = None,
) -> Tuple[VideoClip, TrajectorySet, List[Expression], MatchingRelation, SceneTruth]:
    """Build one scene deterministically from cfg.seed.

    Returns the rendered clip, ground-truth trajectories, tokenized
    expressions, the oracle-computed matching relation, and the generation
    truth (object colors/motions) for use in tests.
    """
    rng = np.random.default_rng(cfg.seed)
    vocab = vocab or grammar_vocabulary()
    placed = _place_objects(cfg, rng)
    frames = _render(cfg, placed)
    vid = video_id or f"scene-{cfg.seed}"
    clip = VideoClip(video_id=vid, frames=frames)

    trajectories = []
    for obj in placed:
        x0, y0 = obj["start"]
        vx, vy = obj["velocity"]
        w, h = obj["size"]
        boxes = {
            t: BoundingBox(x0 + vx * t, y0 + vy * t, float(w), float(h))
            for t in range(cfg.n_frames)
        }
        trajectories.append(Trajectory(target_id=obj["target_id"], boxes=boxes))
    tracks = TrajectorySet(video_id=vid, trajectories=tuple(trajectories))

    truth = SceneTruth(
        objects=tuple(
            ObjectTruth(
                target_id=o["target_id"],
                color=o["color"],
                motion=o["motion"],
                size_class=o["size_class"],
                velocity=o["velocity"],
            )
            for o in placed
        ),
        image_size=cfg.image_size,
    )

    templates = _pick_templates(cfg, placed, rng)
    expressions: List[Expression] = []
    records: List[MatchRecord] = []
    for eid, template in enumerate(templates):
        text = template.render()
        ids, n_real = tokenize(text, vocab, max_text_len)
        expressions.append(Expression(expr_id=eid, text=text, tokens=ids, n_real=n_real))
        for traj in trajectories:
            for lo, hi in evaluate_oracle(template, traj, truth):
                records.append(MatchRecord(eid, traj.target_id, lo, hi))
    relation = MatchingRelation.from_records(
        records,
        expr_ids=[e.expr_id for e in expressions],
        target_ids=[t.target_id for t in trajectories],
    )
    return clip, tracks, expressions, relation, truth


def write_scene(
    out_dir,
    clip: VideoClip,
    tracks: TrajectorySet,
    expressions: Sequence[Expression],
    relation: MatchingRelation,
) -> None:
    """Write one scene directory in the ingestion file formats.

    Layout: frames/000001.png ... (1-based, lossless), tracks.csv,
    expressions.json.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames, start=1):
        Image.fromarray(frame.transpose(1, 2, 0)).save(out / "frames" / f"{i:06d}.png")
    write_tracker_file(out / "tracks.csv", tracks)
    by_expr: Dict[int, List[dict]] = {e.expr_id: [] for e in expressions}
    for r in sorted(relation.pairs, key=lambda r: (r.expr_id, r.target_id, r.frame_start)):
        by_expr[r.expr_id].append(
            dict(target_id=r.target_id, frame_start=r.frame_start, frame_end=r.frame_end)
        )
    write_expressions(
        out / "expressions.json",
        [
            dict(expr_id=e.expr_id, text=e.text, targets=by_expr[e.expr_id])
            for e in expressions
        ],
    )
