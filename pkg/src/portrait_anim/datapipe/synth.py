"""Procedural cartoon-face clips with ground-truth landmarks and face boxes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from skimage.draw import ellipse as draw_ellipse
from skimage.draw import polygon as draw_polygon

from ..landmarks import (
    DEFAULT_EYE_OPEN,
    INNER_LIPS,
    LEFT_EYE,
    OUTER_LIPS,
    RIGHT_EYE,
    LandmarkSequence,
    Placement,
    face_shape,
    rotation_matrix,
)

MOTION_PROFILES = ("static", "talking", "nodding", "two_faces")
HEAD_RX = 1.05
HEAD_RY = 1.3


@dataclass
class Appearance:
    background: tuple[float, float, float]
    skin: tuple[float, float, float]
    eye: tuple[float, float, float]
    lip: tuple[float, float, float]
    mouth: tuple[float, float, float]

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Appearance":
        def col(lo, hi):
            return tuple(float(round(v, 4)) for v in rng.uniform(lo, hi, 3))

        return cls(background=col(0.02, 0.25), skin=col(0.65, 0.95), eye=col(0.0, 0.15),
                   lip=col(0.3, 0.5), mouth=col(0.05, 0.2))

    @classmethod
    def from_dict(cls, d: dict) -> "Appearance":
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass
class MotionScript:
    """Sinusoidal head-pose and mouth-aperture trajectories (frame-indexed)."""

    yaw_amp: float = 0.0
    pitch_amp: float = 0.0
    roll_amp: float = 0.0
    head_period: float = 16.0
    mouth_mean: float = 0.05
    mouth_amp: float = 0.0
    mouth_period: float = 8.0
    eye_open: float = DEFAULT_EYE_OPEN
    phases: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def evaluate(self, n_frames: int) -> dict[str, np.ndarray]:
        t = np.arange(n_frames, dtype=np.float64)
        p = self.phases
        w_head = 2 * math.pi / self.head_period
        return {
            "yaw": self.yaw_amp * np.sin(w_head * t + p[0]),
            "pitch": self.pitch_amp * np.sin(0.75 * w_head * t + p[1]),
            "roll": self.roll_amp * np.sin(0.5 * w_head * t + p[2]),
            "mouth": self.mouth_mean + self.mouth_amp * np.sin(2 * math.pi / self.mouth_period * t + p[3]),
            "eye": np.full(n_frames, self.eye_open),
        }

    def mouth_std(self) -> float:
        """Std of the mouth script over whole periods (amp / sqrt 2)."""
        return self.mouth_amp / math.sqrt(2.0)


def motion_script(profile: str, rng: np.random.Generator, mouth_amplitude: float = 0.15) -> MotionScript:
    if profile not in MOTION_PROFILES:
        raise ValueError(f"unknown motion profile {profile!r}; choose from {MOTION_PROFILES}")
    phases = tuple(float(v) for v in rng.uniform(0, 2 * math.pi, 4))
    if profile == "static":
        return MotionScript(phases=phases)
    if profile == "nodding":
        return MotionScript(yaw_amp=0.1, pitch_amp=0.3, phases=phases)
    return MotionScript(yaw_amp=0.25, pitch_amp=0.15, roll_amp=0.05, mouth_mean=max(0.18, mouth_amplitude + 0.02),
                        mouth_amp=mouth_amplitude, phases=phases)


def posed_points(yaw: float, pitch: float, roll: float, mouth: float, eye: float) -> np.ndarray:
    return face_shape(mouth, eye) @ rotation_matrix(yaw, pitch, roll).T


def face_box(placement: Placement) -> tuple[int, int, int, int]:
    """Square box bounding the head ellipse."""
    half = HEAD_RY * placement.scale
    side = int(math.ceil(2 * half)) + 1
    x0, y0 = int(math.floor(placement.cx - half)), int(math.floor(placement.cy - half))
    return (x0, y0, x0 + side, y0 + side)


def placement_from_box(box) -> Placement:
    x0, y0, x1, y1 = box
    side = min(x1 - x0, y1 - y0)
    return Placement((x0 + x1 - 1) / 2.0, (y0 + y1 - 1) / 2.0, (side - 1) / (2.0 * HEAD_RY))


def render_face(canvas: np.ndarray, points: np.ndarray, placement: Placement, app: Appearance) -> None:
    """Paint one posed face (canonical units) onto an (H, W, 3) canvas in place."""
    h, w = canvas.shape[:2]
    rr, cc = draw_ellipse(placement.cy, placement.cx, HEAD_RY * placement.scale, HEAD_RX * placement.scale,
                          shape=(h, w))
    canvas[rr, cc] = app.skin
    px = placement.cx + placement.scale * points[:, 0]
    py = placement.cy - placement.scale * points[:, 1]

    def fill(idx, color):
        idx = list(idx)
        r, c = draw_polygon(py[idx], px[idx], shape=(h, w))
        canvas[r, c] = color

    fill(LEFT_EYE, app.eye)
    fill(RIGHT_EYE, app.eye)
    fill(OUTER_LIPS, app.lip)
    fill(INNER_LIPS, app.mouth)


def render_frame(width: int, height: int, faces: list[tuple[np.ndarray, Placement, Appearance]],
                 background) -> np.ndarray:
    canvas = np.empty((height, width, 3))
    canvas[:] = background
    for points, placement, app in faces:
        render_face(canvas, points, placement, app)
    return quantize(canvas)


def quantize(frames: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid used for storage so in-memory and on-disk frames agree."""
    return (np.rint(np.clip(frames, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


@dataclass
class SynthClip:
    frames: np.ndarray  # (F, H, W, 3) float32
    landmarks: LandmarkSequence  # primary face, canonical units
    face_boxes: list[list[tuple[int, int, int, int]]]
    placements: list[Placement]
    appearance: Appearance
    script: MotionScript
    profile: str
    seed: int
    extra_appearances: list[Appearance] = field(default_factory=list)

    def meta(self) -> dict:
        return {
            "seed": self.seed,
            "profile": self.profile,
            "appearance": asdict(self.appearance),
            "placement": asdict(self.placements[0]),
            "script": asdict(self.script),
        }


def synth_clip(seed: int, n_frames: int, motion_profile: str = "talking", width: int = 40, height: int = 40,
               fps=25, mouth_amplitude: float = 0.15) -> SynthClip:
    """Render a deterministic clip of a scripted cartoon face."""
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    rng = np.random.default_rng(seed)
    app = Appearance.random(rng)
    script = motion_script(motion_profile, rng, mouth_amplitude)
    traj = script.evaluate(n_frames)

    n_faces = 2 if motion_profile == "two_faces" else 1
    scale = min(width / n_faces, height) * 0.3 / HEAD_RY
    placements, apps = [], [app]
    for i in range(n_faces):
        base_x = width * (i + 0.5) / n_faces
        jitter = rng.uniform(-1.0, 1.0, 2) * min(width, height) * 0.04
        placements.append(Placement(float(base_x - 0.5 + jitter[0]), float(height / 2 - 0.5 + jitter[1]),
                                    float(scale)))
    for _ in range(n_faces - 1):
        apps.append(Appearance.random(rng))

    frames, points, boxes = [], [], []
    for f in range(n_frames):
        pts = posed_points(traj["yaw"][f], traj["pitch"][f], traj["roll"][f], traj["mouth"][f], traj["eye"][f])
        points.append(pts)
        faces = [(pts, placements[0], apps[0])]
        for i in range(1, n_faces):
            faces.append((posed_points(-traj["yaw"][f], traj["pitch"][f], 0.0, traj["mouth"][f], traj["eye"][f]),
                          placements[i], apps[i]))
        frames.append(render_frame(width, height, faces, app.background))
        boxes.append([face_box(p) for p in placements])

    seq = LandmarkSequence.from_points(np.stack(points), Fraction(fps))
    return SynthClip(np.stack(frames), seq, boxes, placements, app, script, motion_profile, seed, apps[1:])
