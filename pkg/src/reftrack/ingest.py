"""File-format boundary: MOT-style tracker CSVs and expression annotation JSON.

This is the seam that keeps the referring model decoupled from the tracker:
everything upstream is consumed through these two file formats.

Tracker CSV, one record per line, 1-based frames:
    frame,id,x,y,w,h,conf[,...]
Trailing "-1" placeholder fields are tolerated and ignored.

Expression file: a JSON list of
    {"expr_id": int, "text": str,
     "targets": [{"target_id": int, "frame_start": int, "frame_end": int}]}
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

from .core import (
    BoundingBox,
    Expression,
    MatchingRelation,
    MatchRecord,
    Trajectory,
    TrajectorySet,
)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_WORD_RE = re.compile(r"[a-z0-9]+")


class TrackerFileError(ValueError):
    """Malformed tracker CSV; message names the offending line."""


class ExpressionSchemaError(ValueError):
    """Expression JSON missing required fields; message names the entry."""


@dataclass(frozen=True)
class Vocabulary:
    """Closed vocabulary with reserved pad and unknown ids."""

    words: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        if self.words[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise ValueError("vocabulary must start with pad and unk tokens")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    @staticmethod
    def build(texts: Iterable[str]) -> "Vocabulary":
        seen = sorted({w for t in texts for w in split_words(t)})
        return Vocabulary((PAD_TOKEN, UNK_TOKEN) + tuple(seen))

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        return self._index.get(word, self.unk_id)

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode()).hexdigest()[:16]


def split_words(text: str) -> List[str]:
    """Lowercase and split on whitespace/punctuation."""
    return _WORD_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> Tuple[Tuple[int, ...], int]:
    """Map text to a fixed-length id sequence.

    Returns (ids padded/truncated to max_len, number of real tokens kept).
    """
    ids = [vocab.id_of(w) for w in split_words(text)]
    ids = ids[:max_len]
    n_real = len(ids)
    ids = ids + [vocab.pad_id] * (max_len - n_real)
    return tuple(ids), n_real


@dataclass
class ParseWarnings:
    """Counts of tolerated irregularities found while parsing."""

    dropped_boxes: int = 0
    duplicates: int = 0
    truncated_expressions: int = 0

    def total(self) -> int:
        return self.dropped_boxes + self.duplicates + self.truncated_expressions


def parse_tracker_file(
    path,
    image_size: Tuple[int, int] = (224, 672),
    video_id: str | None = None,
    warnings: ParseWarnings | None = None,
) -> TrajectorySet:
    """Read a tracker CSV into a TrajectorySet.

    Frames are re-indexed to 0-based. Boxes are clipped to the image; boxes
    that end up with zero or negative size are dropped (counted as warnings).
    Duplicate (frame, id) records keep the higher-confidence line.
    """
    path = Path(path)
    img_h, img_w = image_size
    if warnings is None:
        warnings = ParseWarnings()
    # (frame, id) -> (conf, box)
    best: Dict[Tuple[int, int], Tuple[float, BoundingBox]] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 7:
                raise TrackerFileError(f"{path}:{lineno}: expected >= 7 fields")
            try:
                frame = int(float(parts[0]))
                track_id = int(float(parts[1]))
                x, y, w, h = (float(v) for v in parts[2:6])
                conf = float(parts[6])
            except ValueError as exc:
                raise TrackerFileError(f"{path}:{lineno}: {exc}") from exc
            if frame < 1:
                raise TrackerFileError(f"{path}:{lineno}: frame must be >= 1")
            x1, y1 = max(x, 0.0), max(y, 0.0)
            x2, y2 = min(x + w, float(img_w)), min(y + h, float(img_h))
            if x2 - x1 <= 0 or y2 - y1 <= 0:
                warnings.dropped_boxes += 1
                continue
            box = BoundingBox(x1, y1, x2 - x1, y2 - y1)
            key = (frame - 1, track_id)
            if key in best:
                warnings.duplicates += 1
                if conf <= best[key][0]:
                    continue
            best[key] = (conf, box)
    by_id: Dict[int, Dict[int, BoundingBox]] = {}
    for (frame, track_id), (_, box) in best.items():
        by_id.setdefault(track_id, {})[frame] = box
    trajectories = tuple(
        Trajectory(target_id=i, boxes=b) for i, b in sorted(by_id.items())
    )
    return TrajectorySet(video_id=video_id or path.stem, trajectories=trajectories)


def write_tracker_file(path, tracks: TrajectorySet, confidence: float = 1.0) -> None:
    """Inverse of parse_tracker_file (frames written 1-based)."""
    lines = []
    for traj in tracks.trajectories:
        for frame, box in traj.boxes.items():
            lines.append(
                f"{frame + 1},{traj.target_id},{box.x0:.4f},{box.y0:.4f},"
                f"{box.w:.4f},{box.h:.4f},{confidence:.4f},-1,-1,-1"
            )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def parse_expressions(
    path,
    vocab: Vocabulary,
    max_len: int,
    warnings: ParseWarnings | None = None,
) -> Tuple[List[Expression], MatchingRelation]:
    """Read the expression annotation JSON.

    Expressions are tokenized to ``max_len`` (over-long texts truncated, with
    a warning counted). The relation's target universe is the set of targets
    named in the records; extend it with ``relation.with_targets`` when the
    tracker file mentions unreferred targets.
    """
    path = Path(path)
    if warnings is None:
        warnings = ParseWarnings()
    data = json.loads(path.read_text())
    if not isinstance(data, list):
        raise ExpressionSchemaError(f"{path}: top level must be a list")
    expressions: List[Expression] = []
    records: List[MatchRecord] = []
    for i, entry in enumerate(data):
        for key in ("expr_id", "text", "targets"):
            if key not in entry:
                raise ExpressionSchemaError(f"{path}: entry {i}: missing '{key}'")
        ids, n_real = tokenize(entry["text"], vocab, max_len)
        if len(split_words(entry["text"])) > max_len:
            warnings.truncated_expressions += 1
        expressions.append(
            Expression(
                expr_id=int(entry["expr_id"]),
                text=str(entry["text"]),
                tokens=ids,
                n_real=n_real,
            )
        )
        for j, tgt in enumerate(entry["targets"]):
            for key in ("target_id", "frame_start", "frame_end"):
                if key not in tgt:
                    raise ExpressionSchemaError(
                        f"{path}: entry {i}: target {j}: missing '{key}'"
                    )
            records.append(
                MatchRecord(
                    expr_id=int(entry["expr_id"]),
                    target_id=int(tgt["target_id"]),
                    frame_start=int(tgt["frame_start"]),
                    frame_end=int(tgt["frame_end"]),
                )
            )
    relation = MatchingRelation.from_records(
        records, expr_ids=[e.expr_id for e in expressions]
    )
    return expressions, relation


def write_expressions(path, entries: Sequence[dict]) -> None:
    """Write expression annotations in the schema parse_expressions reads."""
    Path(path).write_text(json.dumps(list(entries), indent=1))
