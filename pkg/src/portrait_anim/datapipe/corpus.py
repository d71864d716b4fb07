"""On-disk corpus operations: synthesise, filter, crop/pad and pick references.

Layout under a data root::

    manifest.jsonl
    clips/<clip_id>/raw/        rendered frames (PPM + index.json)
    clips/<clip_id>/crop/       fixed-size frames after crop_pad
    clips/<clip_id>/landmarks.json
    clips/<clip_id>/identity.npy

Every step rewrites the manifest compactly and is safe to rerun.
"""

from __future__ import annotations

import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..landmarks import Placement
from ..model.identity import VisionEncoderStub
from .croppad import crop_offsets, crop_pad, shift_boxes
from .filtering import FilterThresholds, filter_entry
from .frames_io import fps_to_json, load_frames, save_frames
from .manifest import ClipManifest, Verdict, read_manifests, write_manifests
from .reference import pick_reference
from .synth import MOTION_PROFILES, SynthClip, synth_clip

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
DEFAULT_MIX = ("talking", "talking", "nodding", "talking", "static", "talking", "two_faces", "talking")


def manifest_path(root) -> Path:
    return Path(root) / MANIFEST_NAME


def clip_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def write_clip(root, clip_id: str, clip: SynthClip) -> ClipManifest:
    root = Path(root)
    rel = Path("clips") / clip_id
    save_frames(root / rel / "raw", clip.frames, clip.landmarks.fps)
    clip.landmarks.save(root / rel / "landmarks.json")
    return ClipManifest(
        clip_id=clip_id,
        frames_path=str(rel / "raw"),
        landmarks_path=str(rel / "landmarks.json"),
        n_frames=int(clip.frames.shape[0]),
        fps=fps_to_json(clip.landmarks.fps),
        face_boxes=tuple(tuple(frame) for frame in clip.face_boxes),
        meta={**clip.meta(), "raw_frames_path": str(rel / "raw"), "raw_face_boxes":
              [[list(b) for b in frame] for frame in clip.face_boxes]},
    )


def synth_corpus(root, count: int, seed: int, n_frames: int = 16, width: int = 40, height: int = 40,
                 profiles=DEFAULT_MIX) -> list[ClipManifest]:
    """Render ``count`` clips cycling through ``profiles`` and start a fresh manifest."""
    for p in profiles:
        if p not in MOTION_PROFILES:
            raise ValueError(f"unknown motion profile {p!r}")
    entries = []
    for i in range(count):
        profile = profiles[i % len(profiles)]
        clip = synth_clip(clip_seed(seed, i), n_frames, profile, width, height)
        entries.append(write_clip(root, f"clip{i:04d}", clip))
    write_manifests(manifest_path(root), entries)
    return entries


def filter_corpus(root, thresholds: FilterThresholds) -> list[ClipManifest]:
    entries = list(read_manifests(manifest_path(root)).values())
    out = [e.with_updates(filter_verdict=filter_entry(e, root, thresholds)) for e in entries]
    write_manifests(manifest_path(root), out)
    for e in out:
        log.info("%s: %s", e.clip_id, e.filter_verdict)
    return out


def croppad_corpus(root, target_w: int, target_h: int) -> list[ClipManifest]:
    """Crop kept clips from their raw frames, so reruns reproduce the same output."""
    root = Path(root)
    out = []
    for e in read_manifests(manifest_path(root)).values():
        if not e.filter_verdict.is_kept:
            out.append(e)
            continue
        raw_boxes = tuple(tuple(tuple(b) for b in frame) for frame in e.meta["raw_face_boxes"])
        frames, fps = load_frames(root / e.meta["raw_frames_path"])
        offsets = crop_offsets(frames.shape[2], frames.shape[1], raw_boxes, target_w, target_h)
        rel = Path(e.meta["raw_frames_path"]).parent / "crop"
        save_frames(root / rel, crop_pad(frames, raw_boxes, target_w, target_h, offsets), fps)
        meta = dict(e.meta)
        raw_placement = meta.get("raw_placement", meta["placement"])
        meta["raw_placement"] = raw_placement
        meta["placement"] = asdict(Placement(raw_placement["cx"] - offsets[0], raw_placement["cy"] - offsets[1],
                                             raw_placement["scale"]))
        meta["crop"] = {"width": target_w, "height": target_h, "offset": list(offsets)}
        out.append(e.with_updates(frames_path=str(rel), meta=meta,
                                  face_boxes=shift_boxes(raw_boxes, offsets, target_w, target_h)))
    write_manifests(manifest_path(root), out)
    return out


def reference_corpus(root, encoder: VisionEncoderStub, seed: int) -> list[ClipManifest]:
    out = []
    for e in read_manifests(manifest_path(root)).values():
        if e.filter_verdict.is_kept:
            try:
                _, _, e = pick_reference(e, seed, root, encoder)
            except LookupError as exc:
                e = e.with_updates(filter_verdict=Verdict.error(f"reference: {exc}"))
        out.append(e)
    write_manifests(manifest_path(root), out)
    return out


def kept_clips(root) -> list[ClipManifest]:
    return [e for e in read_manifests(manifest_path(root)).values() if e.filter_verdict.is_kept]
