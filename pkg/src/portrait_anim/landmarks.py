"""Expression-aware 3D facial landmarks.

Coordinates use a right-handed face frame: x to the viewer's right, y up,
z towards the camera. The canonical face is centred on the head centre and
has a half-width of roughly one unit.

Euler angles follow the intrinsic yaw-pitch-roll sequence
``R = R_yaw @ R_pitch @ R_roll`` where yaw turns about the vertical (y)
axis, pitch about the lateral (x) axis and roll about the viewing (z) axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometryError, ShapeError

NUM_LANDMARKS = 68

# (upper, lower) inner-lip pairs of the 68-point topology.
MOUTH_PAIRS: tuple[tuple[int, int], ...] = ((61, 67), (62, 66), (63, 65))
LEFT_EYE_PAIRS: tuple[tuple[int, int], ...] = ((37, 41), (38, 40))
RIGHT_EYE_PAIRS: tuple[tuple[int, int], ...] = ((43, 47), (44, 46))

JAW = range(0, 17)
LEFT_EYE = range(36, 42)
RIGHT_EYE = range(42, 48)
OUTER_LIPS = range(48, 60)
INNER_LIPS = range(60, 68)

DEFAULT_EYE_OPEN = 0.12
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LandmarkFrame:
    points: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"landmark points must be (K, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def k(self) -> int:
        return self.points.shape[0]


@dataclass
class LandmarkSequence:
    frames: list[LandmarkFrame]
    fps: Fraction = field(default_factory=lambda: Fraction(25))

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a landmark sequence needs at least one frame")
        k = self.frames[0].k
        prev = None
        for fr in self.frames:
            if fr.k != k:
                raise ShapeError("landmark count must be constant across a sequence")
            if prev is not None and fr.frame_index <= prev:
                raise ValueError("frame indices must increase monotonically")
            prev = fr.frame_index
        self.fps = Fraction(self.fps)

    def __len__(self):
        return len(self.frames)

    @property
    def k(self) -> int:
        return self.frames[0].k

    @property
    def points(self) -> np.ndarray:
        """Stacked (T, K, 3) coordinates."""
        return np.stack([f.points for f in self.frames])

    @classmethod
    def from_points(cls, points, fps=25) -> "LandmarkSequence":
        return cls([LandmarkFrame(p, i) for i, p in enumerate(np.asarray(points))], Fraction(fps))

    def to_json(self) -> dict:
        fps = self.fps
        return {
            "v": SCHEMA_VERSION,
            "fps": fps.numerator if fps.denominator == 1 else f"{fps.numerator}/{fps.denominator}",
            "k": self.k,
            "frames": [f.points.tolist() for f in self.frames],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LandmarkSequence":
        if doc.get("v") != SCHEMA_VERSION:
            raise ValueError(f"unsupported landmark schema version {doc.get('v')!r}")
        seq = cls.from_points(np.asarray(doc["frames"], dtype=np.float64), Fraction(doc["fps"]))
        if seq.k != doc["k"]:
            raise ShapeError(f"declared k={doc['k']} but frames carry {seq.k} points")
        return seq

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "LandmarkSequence":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class HeadPose:
    yaw: float
    pitch: float
    roll: float

    def __post_init__(self):
        for name in ("yaw", "pitch", "roll"):
            val = getattr(self, name)
            if not -math.pi <= val <= math.pi:
                raise ValueError(f"{name}={val} outside [-pi, pi]")

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.roll])


def face_shape(mouth_open: float = 0.0, eye_open: float = DEFAULT_EYE_OPEN) -> np.ndarray:
    """Canonical 68-point face with the given inner-lip gap and eye opening.

    Mouth and eye deformations move points along y only, so each
    upper/lower pair stays vertically aligned and its distance equals the
    requested aperture.
    """
    pts = np.zeros((NUM_LANDMARKS, 3))

    def depth(x, y):
        return 0.8 * math.sqrt(max(0.0, 1.0 - (x / 1.25) ** 2 - (y / 1.55) ** 2))

    def put(i, x, y, y_depth=None, dz=0.0):
        pts[i] = (x, y, depth(x, y if y_depth is None else y_depth) + dz)

    for j, i in enumerate(JAW):
        phi = math.pi * j / 16
        put(i, -0.95 * math.cos(phi), 0.05 - 1.15 * math.sin(phi))
    for side, start in ((-1, 17), (1, 22)):
        for j in range(5):
            t = j / 4
            x = side * (0.75 - 0.6 * t) if side < 0 else 0.15 + 0.6 * t
            put(start + j, x, 0.48 + 0.08 * math.sin(math.pi * t))
    for j in range(4):
        put(27 + j, 0.0, 0.3 - 0.15 * j, dz=0.08 * (j + 1))
    for j in range(5):
        put(31 + j, -0.18 + 0.09 * j, -0.25, dz=0.1 - 0.04 * abs(j - 2))

    h = eye_open / 2
    ey = 0.25
    for cx, start in ((-0.4, 36), (0.4, 42)):
        # 36/45 are the outer corners, 39/42 the inner ones.
        left, right = cx - 0.17, cx + 0.17
        put(start, left, ey)
        put(start + 1, cx - 0.06, ey + h, y_depth=ey)
        put(start + 2, cx + 0.06, ey + h, y_depth=ey)
        put(start + 3, right, ey)
        put(start + 4, cx + 0.06, ey - h, y_depth=ey)
        put(start + 5, cx - 0.06, ey - h, y_depth=ey)

    my = -0.55
    a = mouth_open / 2
    outer_upper = [(-0.35, 0.0), (-0.22, 0.05), (-0.09, 0.08), (0.0, 0.07), (0.09, 0.08), (0.22, 0.05)]
    for j, (x, dy) in enumerate(outer_upper):
        put(48 + j, x, my + dy + (a if j else 0.0), y_depth=my)
    put(54, 0.35, my, y_depth=my)
    outer_lower = [(0.22, -0.07), (0.09, -0.1), (0.0, -0.1), (-0.09, -0.1), (-0.22, -0.07)]
    for j, (x, dy) in enumerate(outer_lower):
        put(55 + j, x, my + dy - a, y_depth=my)
    put(60, -0.25, my, y_depth=my)
    for j, x in enumerate((-0.12, 0.0, 0.12)):
        put(61 + j, x, my + a, y_depth=my)
    put(64, 0.25, my, y_depth=my)
    for j, x in enumerate((0.12, 0.0, -0.12)):
        put(65 + j, x, my - a, y_depth=my)
    return pts


def canonical_template() -> LandmarkFrame:
    """The neutral face: closed mouth, default eye opening."""
    return LandmarkFrame(face_shape(), 0)


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    r_yaw = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    r_pitch = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    r_roll = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return r_yaw @ r_pitch @ r_roll


def euler_from_matrix(rot: np.ndarray) -> HeadPose:
    rot = np.asarray(rot, dtype=np.float64)
    sp = -rot[1, 2]
    pitch = math.asin(min(1.0, max(-1.0, sp)))
    if abs(sp) < 1.0 - 1e-12:
        yaw = math.atan2(rot[0, 2], rot[2, 2])
        roll = math.atan2(rot[1, 0], rot[1, 1])
    else:
        # Gimbal lock: only yaw +/- roll is observable, put it all in yaw.
        roll = 0.0
        yaw = math.atan2(-rot[2, 0], rot[0, 0])
    return HeadPose(yaw, pitch, roll)


def procrustes_rotation(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Proper rotation R minimising ||R @ source_i - target_i|| after centring."""
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape:
        raise ShapeError(f"point sets differ in shape: {src.shape} vs {dst.shape}")
    src = src - src.mean(axis=0)
    dst = dst - dst.mean(axis=0)
    cross = dst.T @ src
    u, s, vt = np.linalg.svd(cross)
    scale = max(s[0], 1e-300)
    if s[0] < 1e-12 or s[1] / scale < 1e-9:
        raise DegenerateGeometryError("landmark sets are rank-deficient; rotation is not determined")
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def head_pose_from_landmarks(frame: LandmarkFrame, template: LandmarkFrame) -> HeadPose:
    """Euler angles of the rotation taking the neutral template onto ``frame``."""
    if frame.k != template.k:
        raise ShapeError(f"frame has {frame.k} landmarks, template {template.k}")
    return euler_from_matrix(procrustes_rotation(template.points, frame.points))


def aperture(points: np.ndarray, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    """Mean upper/lower distance over ``pairs``; works on (K,3) or (T,K,3)."""
    pts = np.asarray(points)
    upper = pts[..., [p[0] for p in pairs], :]
    lower = pts[..., [p[1] for p in pairs], :]
    return np.linalg.norm(upper - lower, axis=-1).mean(axis=-1)


def mouth_variation(seq: LandmarkSequence, mouth_pairs: Sequence[tuple[int, int]] = MOUTH_PAIRS) -> float:
    """Population standard deviation of the inner-lip aperture across frames.

    A single-frame sequence has no variation and yields 0.
    """
    for u, l in mouth_pairs:
        if not (0 <= u < seq.k and 0 <= l < seq.k):
            raise IndexError(f"mouth pair ({u}, {l}) invalid for K={seq.k}")
    if len(seq) == 1:
        return 0.0
    return float(np.std(aperture(seq.points, mouth_pairs)))


def expression_params(points: np.ndarray) -> np.ndarray:
    """Blendshape stand-ins: (mouth, left eye, right eye) apertures."""
    return np.stack(
        [aperture(points, MOUTH_PAIRS), aperture(points, LEFT_EYE_PAIRS), aperture(points, RIGHT_EYE_PAIRS)],
        axis=-1,
    )


def pose_track(seq: LandmarkSequence, template: LandmarkFrame | None = None) -> np.ndarray:
    """(T, 3) yaw/pitch/roll per frame."""
    template = template or canonical_template()
    return np.stack([head_pose_from_landmarks(f, template).as_array() for f in seq.frames])


def head_angle_range(seq: LandmarkSequence, template: LandmarkFrame | None = None) -> float:
    """Largest peak-to-peak excursion among the three Euler angles."""
    return float(np.ptp(pose_track(seq, template), axis=0).max())


@dataclass(frozen=True)
class Placement:
    """Maps canonical face units to pixels: centre (cx, cy) and pixels per unit."""

    cx: float
    cy: float
    scale: float


def place_landmarks(frame: LandmarkFrame, placement: Placement, width: int, height: int) -> LandmarkFrame:
    """Re-express canonical landmarks in normalised image coordinates ([-1, 1], y up)."""
    px = placement.cx + placement.scale * frame.points[:, 0]
    py = placement.cy - placement.scale * frame.points[:, 1]
    out = np.stack(
        [(px + 0.5) / width * 2.0 - 1.0, 1.0 - (py + 0.5) / height * 2.0, frame.points[:, 2]],
        axis=1,
    )
    return LandmarkFrame(out, frame.frame_index)


def landmark_pixels(frame: LandmarkFrame, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer (row, col) of each landmark under the orthographic image mapping."""
    cols = np.rint((frame.points[:, 0] + 1.0) / 2.0 * width - 0.5).astype(np.int64)
    rows = np.rint((1.0 - frame.points[:, 1]) / 2.0 * height - 0.5).astype(np.int64)
    return rows, cols


def rasterize_landmarks(frame: LandmarkFrame, width: int, height: int, radius: float = 1.0) -> np.ndarray:
    """Draw each landmark as a hard disc on a (height, width) float image.

    Landmarks whose centre pixel falls outside the image are dropped.
    """
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    img = np.zeros((height, width), dtype=np.float32)
    rows, cols = landmark_pixels(frame, width, height)
    inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    rr, cc = np.ogrid[:height, :width]
    r2 = radius * radius
    for r, c in zip(rows[inside], cols[inside]):
        img[(rr - r) ** 2 + (cc - c) ** 2 <= r2] = 1.0
    return img


def rasterize_sequence(seq: LandmarkSequence, placement: Placement, width: int, height: int,
                       radius: float = 1.0) -> np.ndarray:
    """(T, height, width) conditioning images for a placed landmark sequence."""
    return np.stack(
        [rasterize_landmarks(place_landmarks(f, placement, width, height), width, height, radius)
         for f in seq.frames]
    )
