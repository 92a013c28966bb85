"""Domain types shared across the pipeline: boxes, trajectories, expressions,
trajectory segments, and the expression-to-trajectory matching relation.

All types are immutable value objects; the operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np


class AnnotationError(KeyError):
    """Raised when a queried expression or target id is not in the annotation."""


class EmptyTrajectoryError(ValueError):
    """Raised when an operation needs at least one box and the trajectory has none."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, top-left origin, xywh layout."""

    x0: float
    y0: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x0 + self.w / 2.0, self.y0 + self.h / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class Trajectory:
    """One target's boxes indexed by frame. Frame gaps are allowed (the target
    may be occluded or lost by the tracker for a while and reappear)."""

    target_id: int
    boxes: Dict[int, BoundingBox]

    def __post_init__(self):
        # normalize to a plain dict sorted by frame so iteration order is stable
        object.__setattr__(self, "boxes", dict(sorted(self.boxes.items())))

    @property
    def frames(self) -> List[int]:
        return list(self.boxes.keys())

    @property
    def first_frame(self) -> int:
        if not self.boxes:
            raise EmptyTrajectoryError(f"trajectory {self.target_id} has no boxes")
        return next(iter(self.boxes))

    @property
    def last_frame(self) -> int:
        if not self.boxes:
            raise EmptyTrajectoryError(f"trajectory {self.target_id} has no boxes")
        return next(reversed(self.boxes))

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class TrajectorySet:
    """All tracked targets of one video."""

    video_id: str
    trajectories: Tuple[Trajectory, ...]

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        ids = [t.target_id for t in self.trajectories]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate target ids in video {self.video_id}")

    def by_id(self, target_id: int) -> Trajectory:
        for t in self.trajectories:
            if t.target_id == target_id:
                return t
        raise KeyError(target_id)

    @property
    def target_ids(self) -> List[int]:
        return [t.target_id for t in self.trajectories]

    def __len__(self) -> int:
        return len(self.trajectories)


@dataclass(frozen=True)
class TrajectorySegment:
    """A fixed-length window of one trajectory: the unit the model scores.

    ``boxes`` always holds one box per window frame; frames where the tracker
    had no box carry the nearest present box (grid construction needs a box
    everywhere) and are flagged False in ``present``.
    """

    target_id: int
    start_frame: int
    boxes: Tuple[BoundingBox, ...]
    present: Tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "present", tuple(self.present))
        if len(self.boxes) != len(self.present):
            raise ValueError("boxes and present mask length mismatch")
        if not any(self.present):
            raise ValueError("segment must contain at least one present frame")

    @property
    def length(self) -> int:
        return len(self.boxes)

    @property
    def frames(self) -> range:
        return range(self.start_frame, self.start_frame + self.length)

    def present_frames(self) -> List[int]:
        return [f for f, p in zip(self.frames, self.present) if p]

    def box_array(self) -> np.ndarray:
        """Boxes stacked as a [length, 4] float array (xywh)."""
        return np.stack([b.as_array() for b in self.boxes])


@dataclass(frozen=True)
class Expression:
    """A natural-language expression, already tokenized to fixed length."""

    expr_id: int
    text: str
    tokens: Tuple[int, ...]
    n_real: int  # number of non-pad positions

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.n_real > len(self.tokens):
            raise ValueError("n_real exceeds token length")

    @property
    def pad_mask(self) -> Tuple[bool, ...]:
        """True at padded positions."""
        return tuple(i >= self.n_real for i in range(len(self.tokens)))


@dataclass(frozen=True)
class MatchRecord:
    """One (expression, target) correspondence valid over a frame range."""

    expr_id: int
    target_id: int
    frame_start: int
    frame_end: int  # inclusive

    def __post_init__(self):
        if self.frame_start > self.frame_end:
            raise ValueError("frame_start must be <= frame_end")


@dataclass(frozen=True)
class MatchingRelation:
    """Ground-truth many-to-many relation between expressions and targets.

    Relations are frame-ranged because an expression such as "the car on the
    left" can stop holding as the target moves. ``expr_ids`` / ``target_ids``
    are the known annotation universes; querying outside them is an error
    rather than an implicit negative.
    """

    pairs: FrozenSet[MatchRecord]
    expr_ids: FrozenSet[int]
    target_ids: FrozenSet[int]

    def __post_init__(self):
        object.__setattr__(self, "pairs", frozenset(self.pairs))
        object.__setattr__(self, "expr_ids", frozenset(self.expr_ids))
        object.__setattr__(self, "target_ids", frozenset(self.target_ids))
        for r in self.pairs:
            if r.expr_id not in self.expr_ids or r.target_id not in self.target_ids:
                raise ValueError(f"record {r} outside declared universes")

    @staticmethod
    def from_records(
        records: Sequence[MatchRecord],
        expr_ids: Optional[Sequence[int]] = None,
        target_ids: Optional[Sequence[int]] = None,
    ) -> "MatchingRelation":
        e = set(r.expr_id for r in records) | set(expr_ids or ())
        t = set(r.target_id for r in records) | set(target_ids or ())
        return MatchingRelation(frozenset(records), frozenset(e), frozenset(t))

    def with_targets(self, target_ids: Sequence[int]) -> "MatchingRelation":
        """Extend the target universe (e.g. with targets that match nothing)."""
        return MatchingRelation(
            self.pairs, self.expr_ids, self.target_ids | set(target_ids)
        )

    def records_for(self, expr_id: int, target_id: int) -> List[MatchRecord]:
        return [
            r for r in self.pairs if r.expr_id == expr_id and r.target_id == target_id
        ]


@dataclass(frozen=True)
class VideoClip:
    """A resized frame sequence held in memory as uint8 arrays [3, H, W]."""

    video_id: str
    frames: Tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise ValueError(f"frames differ in resolution: {shapes}")

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def image_size(self) -> Tuple[int, int]:
        """(height, width) of the frames."""
        _, h, w = self.frames[0].shape
        return (h, w)


def segment_label(
    relation: MatchingRelation,
    segment: TrajectorySegment,
    expr_id: int,
    coverage_threshold: float = 0.5,
) -> int:
    """Binary label: does ``expr_id`` refer to this segment?

    Returns 1 iff the union of the relation's frame ranges for
    (expr_id, segment.target_id) covers strictly more than
    ``coverage_threshold`` of the segment's present frames.
    """
    if expr_id not in relation.expr_ids:
        raise AnnotationError(f"expression {expr_id} not in annotation")
    if segment.target_id not in relation.target_ids:
        raise AnnotationError(f"target {segment.target_id} not in annotation")
    present = segment.present_frames()
    covered = 0
    for f in present:
        for r in relation.records_for(expr_id, segment.target_id):
            if r.frame_start <= f <= r.frame_end:
                covered += 1
                break
    return 1 if covered > coverage_threshold * len(present) else 0


def window_segments(
    trajectory: Trajectory, p: int, stride: int
) -> List[TrajectorySegment]:
    """Slide length-``p`` windows over the trajectory's frame span.

    Windows start at first_frame, first_frame + stride, ... and must fit
    entirely inside [first_frame, last_frame]. Missing frames inside a window
    get present=False and the nearest present frame's box (earlier frame wins
    ties) so that downstream grid construction always has a box. Windows that
    land entirely inside a gap are dropped: there is nothing to score there.
    """
    if p < 1 or stride < 1:
        raise ValueError("p and stride must be >= 1")
    if len(trajectory) == 0:
        raise EmptyTrajectoryError(f"trajectory {trajectory.target_id} has no boxes")
    lo, hi = trajectory.first_frame, trajectory.last_frame
    present_frames = trajectory.frames
    out: List[TrajectorySegment] = []
    start = lo
    while start + p - 1 <= hi:
        boxes, present = [], []
        for f in range(start, start + p):
            if f in trajectory.boxes:
                boxes.append(trajectory.boxes[f])
                present.append(True)
            else:
                nearest = min(present_frames, key=lambda g: (abs(g - f), g))
                boxes.append(trajectory.boxes[nearest])
                present.append(False)
        if any(present):
            out.append(
                TrajectorySegment(
                    target_id=trajectory.target_id,
                    start_frame=start,
                    boxes=tuple(boxes),
                    present=tuple(present),
                )
            )
        start += stride
    return out
