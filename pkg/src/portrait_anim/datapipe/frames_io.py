"""Lossless frame-sequence storage: one binary PPM per frame plus an index."""

from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ShapeError

INDEX_NAME = "index.json"
SCHEMA_VERSION = 1


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def fps_to_json(fps) -> int | str:
    fps = Fraction(fps)
    return fps.numerator if fps.denominator == 1 else f"{fps.numerator}/{fps.denominator}"


def save_frames(directory, frames: np.ndarray, fps=25) -> Path:
    """Write (F, H, W, 3) frames in [0, 1] as ``00000.ppm`` ... and ``index.json``."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3 or frames.shape[0] < 1:
        raise ShapeError(f"expected (F, H, W, 3) frames, got {frames.shape}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = to_uint8(frames)
    names = []
    for i, frame in enumerate(data):
        name = f"{i:05d}.ppm"
        Image.fromarray(frame, mode="RGB").save(directory / name, format="PPM")
        names.append(name)
    index = {"v": SCHEMA_VERSION, "n_frames": len(names), "width": int(frames.shape[2]),
             "height": int(frames.shape[1]), "fps": fps_to_json(fps), "files": names}
    (directory / INDEX_NAME).write_text(json.dumps(index, indent=1) + "\n")
    return directory


def read_index(directory) -> dict:
    index = json.loads((Path(directory) / INDEX_NAME).read_text())
    if index.get("v") != SCHEMA_VERSION:
        raise ValueError(f"{directory}: unsupported frame index schema {index.get('v')!r}")
    return index


def load_frames(directory) -> tuple[np.ndarray, Fraction]:
    """Inverse of :func:`save_frames`; returns float32 frames on the 8-bit grid and fps."""
    directory = Path(directory)
    index = read_index(directory)
    frames = []
    for name in index["files"]:
        with Image.open(directory / name) as im:
            arr = np.asarray(im.convert("RGB"))
        if arr.shape[:2] != (index["height"], index["width"]):
            raise ShapeError(f"{directory / name}: size {arr.shape[:2]} disagrees with index")
        frames.append(arr)
    return (np.stack(frames).astype(np.float32) / 255.0), Fraction(index["fps"])
