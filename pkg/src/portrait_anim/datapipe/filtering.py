"""Single-character, motion and length filtering of clips."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

from ..errors import ConfigError
from ..landmarks import MOUTH_PAIRS, LandmarkSequence, head_angle_range, mouth_variation
from .manifest import ClipManifest, Verdict

MULTI_CHARACTER = "multi-character"
INSUFFICIENT_MOTION = "insufficient motion"
TOO_SHORT = "too short"


@dataclass(frozen=True)
class FilterThresholds:
    min_head_angle_range: float = 0.1  # radians
    min_mouth_variation: float = 0.02  # canonical face units
    max_faces: int = 1
    min_frames: int = 16

    def validate(self) -> "FilterThresholds":
        for name, value in asdict(self).items():
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigError(f"filter threshold {name} must be positive, got {value!r}")
        if int(self.max_faces) != self.max_faces or int(self.min_frames) != self.min_frames:
            raise ConfigError("max_faces and min_frames must be integers")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FilterThresholds":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown filter threshold keys {sorted(unknown)}")
        return cls(**d).validate()


def motion_stats(seq: LandmarkSequence) -> dict[str, float]:
    return {"head_angle_range": head_angle_range(seq), "mouth_variation": mouth_variation(seq, MOUTH_PAIRS)}


def filter_clip(manifest: ClipManifest, seq: LandmarkSequence, thresholds: FilterThresholds) -> Verdict:
    """Apply the rules in order: face count, then motion, then length."""
    thresholds.validate()
    if any(len(boxes) > thresholds.max_faces for boxes in manifest.face_boxes):
        return Verdict.dropped(MULTI_CHARACTER)
    stats = motion_stats(seq)
    if (stats["head_angle_range"] < thresholds.min_head_angle_range
            and stats["mouth_variation"] < thresholds.min_mouth_variation):
        return Verdict.dropped(INSUFFICIENT_MOTION)
    if manifest.n_frames < thresholds.min_frames:
        return Verdict.dropped(TOO_SHORT)
    return Verdict.kept()


def filter_entry(manifest: ClipManifest, root, thresholds: FilterThresholds) -> Verdict:
    """Load the clip's landmarks and filter it; unreadable inputs give an error verdict."""
    try:
        seq = LandmarkSequence.load(Path(root) / manifest.landmarks_path)
    except (OSError, ValueError, KeyError) as exc:
        return Verdict.error(f"{type(exc).__name__}: {exc}")
    return filter_clip(manifest, seq, thresholds)
