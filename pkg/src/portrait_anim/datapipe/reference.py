"""Reference-frame selection and identity-embedding persistence."""

from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np

from ..model.identity import VisionEncoderStub, face_extract, vision_encode
from .frames_io import load_frames
from .manifest import ClipManifest

EMBEDDING_NAME = "identity.npy"


def reference_index(clip_id: str, n_frames: int, seed: int) -> int:
    """Seeded uniform frame index, stable per (seed, clip) regardless of processing order."""
    rng = np.random.default_rng([int(seed), zlib.crc32(clip_id.encode("utf-8"))])
    return int(rng.integers(n_frames))


def pick_reference(manifest: ClipManifest, seed: int, root, encoder: VisionEncoderStub
                   ) -> tuple[int, np.ndarray, ClipManifest]:
    """Choose a frame, embed its face and save the embedding next to the clip.

    Returns the index, the embedding and the updated manifest entry.
    FaceNotFoundError from the face extractor propagates.
    """
    root = Path(root)
    idx = reference_index(manifest.clip_id, manifest.n_frames, seed)
    frames, _ = load_frames(root / manifest.frames_path)
    boxes = manifest.face_boxes[idx] if manifest.face_boxes else ()
    crop = face_extract(frames[idx], encoder.input_size, box=boxes[0] if boxes else None)
    emb = vision_encode(encoder, crop.image).astype(np.float32)
    rel = Path(manifest.frames_path).parent / EMBEDDING_NAME
    np.save(root / rel, emb, allow_pickle=False)
    return idx, emb, manifest.with_updates(reference_frame=idx, identity_embedding_path=str(rel))


def load_embedding(root, manifest: ClipManifest) -> np.ndarray:
    if manifest.identity_embedding_path is None:
        raise FileNotFoundError(f"clip {manifest.clip_id} has no identity embedding yet")
    return np.load(Path(root) / manifest.identity_embedding_path, allow_pickle=False)
