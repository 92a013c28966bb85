"""Language-referred multi-object tracking on top of off-the-shelf trackers.

Given tracker-output trajectories and natural-language expressions, the model
scores which trajectory segments each expression refers to, sampling its
visual evidence straight off a shared backbone instead of re-encoding crops.
"""

__version__ = "0.1.0"

from .core import (
    BoundingBox,
    Expression,
    MatchingRelation,
    MatchRecord,
    Trajectory,
    TrajectorySegment,
    TrajectorySet,
    VideoClip,
    segment_label,
    window_segments,
)

__all__ = [
    "BoundingBox",
    "Expression",
    "MatchingRelation",
    "MatchRecord",
    "Trajectory",
    "TrajectorySegment",
    "TrajectorySet",
    "VideoClip",
    "segment_label",
    "window_segments",
    "__version__",
]
