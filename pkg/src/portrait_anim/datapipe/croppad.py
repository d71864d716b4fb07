"""Crop or pad clips to a fixed frame size around the union face box."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError

FULL_SCALE_TARGET = (480, 720)  # (width, height)


def union_box(face_boxes) -> tuple[int, int, int, int]:
    boxes = [b for frame in face_boxes for b in np.atleast_2d(np.asarray(frame, dtype=np.int64)) if len(b)]
    if not boxes:
        raise ValueError("no face boxes to take the union of")
    arr = np.stack(boxes)
    return (int(arr[:, 0].min()), int(arr[:, 1].min()), int(arr[:, 2].max()), int(arr[:, 3].max()))


def _axis_offset(lo: int, hi: int, size: int, target: int) -> int:
    """Window start along one axis: centred on [lo, hi), clamped when the frame is large enough."""
    start = int(np.floor((lo + hi - target) / 2.0))
    if size >= target:
        return int(np.clip(start, 0, size - target))
    # Frame too small: centre the frame inside the padded window.
    return -((target - size) // 2)


def crop_offsets(frame_w: int, frame_h: int, face_boxes, target_w: int, target_h: int) -> tuple[int, int]:
    """Top-left corner (x0, y0) of the output window in input coordinates (may be negative)."""
    if target_w <= 0 or target_h <= 0:
        raise ValueError(f"target size must be positive, got {target_w}x{target_h}")
    try:
        x0, y0, x1, y1 = union_box(face_boxes)
    except ValueError:
        x0, y0, x1, y1 = 0, 0, frame_w, frame_h
    return _axis_offset(x0, x1, frame_w, target_w), _axis_offset(y0, y1, frame_h, target_h)


def crop_pad(frames, face_boxes, target_w: int = FULL_SCALE_TARGET[0], target_h: int = FULL_SCALE_TARGET[1],
             offsets: tuple[int, int] | None = None) -> np.ndarray:
    """Return frames of exactly (target_h, target_w), edge-replicating outside the source."""
    frames = np.asarray(frames)
    if frames.ndim < 3 or frames.shape[0] == 0:
        raise ShapeError("crop_pad needs a non-empty (F, H, W[, C]) frame stack")
    h, w = frames.shape[1:3]
    ox, oy = offsets if offsets is not None else crop_offsets(w, h, face_boxes, target_w, target_h)
    rows = np.clip(np.arange(target_h) + oy, 0, h - 1)
    cols = np.clip(np.arange(target_w) + ox, 0, w - 1)
    return frames[:, rows][:, :, cols]


def shift_boxes(face_boxes, offsets: tuple[int, int], target_w: int, target_h: int):
    """Move boxes into output coordinates, clipped to the output frame."""
    ox, oy = offsets
    out = []
    for frame in face_boxes:
        shifted = []
        for x0, y0, x1, y1 in frame:
            shifted.append((int(np.clip(x0 - ox, 0, target_w)), int(np.clip(y0 - oy, 0, target_h)),
                            int(np.clip(x1 - ox, 0, target_w)), int(np.clip(y1 - oy, 0, target_h))))
        out.append(tuple(shifted))
    return tuple(out)
