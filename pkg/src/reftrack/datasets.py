"""Scene-directory loading for training and evaluation.

A scene directory is what synth-data writes and what infer consumes:
frames/000001.png ..., tracks.csv, expressions.json. Frames are decoded
lazily and cached per scene, since holding hundreds of float frame stacks in
memory is what kills desk-scale runs.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import json
import numpy as np
from PIL import Image

from .core import Expression, MatchingRelation, TrajectorySet, VideoClip
from .ingest import ParseWarnings, Vocabulary, parse_expressions, parse_tracker_file


@dataclass
class SceneBundle:
    """One scene's annotations plus lazy access to its frames."""

    scene_dir: Path
    tracks: TrajectorySet
    expressions: List[Expression]
    relation: MatchingRelation
    frame_paths: List[Path]

    @property
    def video_id(self) -> str:
        return self.tracks.video_id

    @property
    def frame_count(self) -> int:
        return len(self.frame_paths)

    def load_clip(self) -> VideoClip:
        frames = tuple(_decode_frame(p) for p in self.frame_paths)
        return VideoClip(video_id=self.video_id, frames=frames)


def _decode_frame(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def discover_scenes(root) -> List[Path]:
    """Scene subdirectories of a dataset root, sorted by name."""
    root = Path(root)
    return sorted(
        d for d in root.iterdir() if d.is_dir() and (d / "tracks.csv").exists()
    )


def read_expression_texts(root) -> List[str]:
    """All expression texts under a dataset root (for vocabulary building)."""
    texts: List[str] = []
    for scene in discover_scenes(root):
        data = json.loads((scene / "expressions.json").read_text())
        texts.extend(str(e["text"]) for e in data)
    return texts


def load_scene(
    scene_dir,
    vocab: Vocabulary,
    max_text_len: int,
    image_size: Tuple[int, int] = (224, 672),
    warnings: Optional[ParseWarnings] = None,
) -> SceneBundle:
    scene_dir = Path(scene_dir)
    tracks = parse_tracker_file(
        scene_dir / "tracks.csv",
        image_size=image_size,
        video_id=scene_dir.name,
        warnings=warnings,
    )
    expressions, relation = parse_expressions(
        scene_dir / "expressions.json", vocab, max_text_len, warnings=warnings
    )
    relation = relation.with_targets(tracks.target_ids)
    frame_paths = sorted((scene_dir / "frames").glob("*.png"))
    return SceneBundle(
        scene_dir=scene_dir,
        tracks=tracks,
        expressions=expressions,
        relation=relation,
        frame_paths=frame_paths,
    )


def load_scenes(
    root,
    vocab: Vocabulary,
    max_text_len: int,
    image_size: Tuple[int, int] = (224, 672),
    limit: Optional[int] = None,
) -> List[SceneBundle]:
    dirs = discover_scenes(root)
    if limit is not None:
        dirs = dirs[:limit]
    return [load_scene(d, vocab, max_text_len, image_size) for d in dirs]


class ClipCache:
    """Keeps the most recently used scenes' decoded frames (uint8 stacks)."""

    def __init__(self, capacity: int = 4):
        self.capacity = capacity
        self._store: "OrderedDict[Path, np.ndarray]" = OrderedDict()

    def frames(self, scene: SceneBundle) -> np.ndarray:
        """[T, 3, H, W] uint8 stack for the scene."""
        key = scene.scene_dir
        if key in self._store:
            self._store.move_to_end(key)
            return self._store[key]
        stack = np.stack([_decode_frame(p) for p in scene.frame_paths])
        self._store[key] = stack
        if len(self._store) > self.capacity:
            self._store.popitem(last=False)
        return stack
