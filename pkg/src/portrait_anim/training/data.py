"""Training examples: fixed-length clip windows with every conditioning input precomputed."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..datapipe.frames_io import load_frames
from ..datapipe.manifest import ClipManifest
from ..datapipe.reference import load_embedding
from ..flowmask import DEFAULT_FLOW_TO_INTENSITY, clip_weight_masks, latent_weight_masks
from ..landmarks import LandmarkSequence, Placement, rasterize_sequence
from ..model.dit import Conditions, PortraitDiT

DEFAULT_PROMPT = "a person is talking"


@dataclass
class Example:
    clip_id: str
    start: int
    frames: np.ndarray  # (F, H, W, 3) float32
    latent: torch.Tensor  # (N, C, H', W')
    landmark_video: torch.Tensor  # (F, 1, H, W)
    id_embedding: torch.Tensor  # (d_id,)
    text_ids: torch.Tensor  # (L,)
    text_mask: torch.Tensor  # (L,)
    weight_mask: torch.Tensor  # (N, H', W') float64


@dataclass
class Batch:
    latents: torch.Tensor
    landmark_video: torch.Tensor
    id_embeddings: torch.Tensor
    text_ids: torch.Tensor
    text_mask: torch.Tensor
    weight_masks: torch.Tensor
    clip_ids: list[str]

    @classmethod
    def collate(cls, examples: list[Example]) -> "Batch":
        return cls(
            latents=torch.stack([e.latent for e in examples]),
            landmark_video=torch.stack([e.landmark_video for e in examples]),
            id_embeddings=torch.stack([e.id_embedding for e in examples]),
            text_ids=torch.stack([e.text_ids for e in examples]),
            text_mask=torch.stack([e.text_mask for e in examples]),
            weight_masks=torch.stack([e.weight_mask for e in examples]),
            clip_ids=[f"{e.clip_id}@{e.start}" for e in examples],
        )

    def conditions(self, drop: torch.Tensor | None = None) -> Conditions:
        return Conditions(self.id_embeddings, self.text_ids, self.text_mask, landmark_video=self.landmark_video,
                          drop=drop)

    def with_unit_weights(self) -> "Batch":
        return Batch(self.latents, self.landmark_video, self.id_embeddings, self.text_ids, self.text_mask,
                     torch.ones_like(self.weight_masks), self.clip_ids)


@torch.no_grad()
def encode_frames(model: PortraitDiT, frames: np.ndarray) -> torch.Tensor:
    """(F, H, W, 3) frames -> (N, C, H', W') scaled latents."""
    x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)).permute(0, 3, 1, 2)[None]
    return model.vae_stub.encode(x)[0]


@torch.no_grad()
def decode_latents(model: PortraitDiT, latents: torch.Tensor) -> np.ndarray:
    """(N, C, H', W') or (B, N, C, H', W') latents -> (.., F, H, W, 3) float32 frames."""
    batched = latents.dim() == 5
    out = model.vae_stub.decode(latents if batched else latents[None])
    out = out.permute(0, 1, 3, 4, 2).numpy()
    return out if batched else out[0]


def landmark_video(seq: LandmarkSequence, placement: Placement, width: int, height: int,
                   radius: float) -> torch.Tensor:
    return torch.from_numpy(rasterize_sequence(seq, placement, width, height, radius))[:, None]


def clip_examples(model: PortraitDiT, clip_id: str, frames: np.ndarray, seq: LandmarkSequence,
                  placement: Placement, id_embedding: np.ndarray, prompt: str = DEFAULT_PROMPT,
                  flow_to_intensity: float = DEFAULT_FLOW_TO_INTENSITY, masks: np.ndarray | None = None
                  ) -> list[Example]:
    """Split a clip into non-overlapping windows of the model's frame count."""
    cfg = model.cfg
    f = cfg.pixel_frames
    n_frames, h, w = frames.shape[:3]
    if (h, w) != (cfg.pixel_height, cfg.pixel_width):
        raise ValueError(f"clip {clip_id} is {w}x{h}, model expects {cfg.pixel_width}x{cfg.pixel_height}")
    if len(seq) != n_frames:
        raise ValueError(f"clip {clip_id}: {len(seq)} landmark frames for {n_frames} video frames")
    if masks is None:
        masks, _ = clip_weight_masks(frames, flow_to_intensity)
    lm_all = landmark_video(seq, placement, w, h, cfg.landmark_radius)
    ids, mask = model.text_stub.tokenize(prompt)
    emb = torch.as_tensor(np.asarray(id_embedding), dtype=torch.float32)
    out = []
    for start in range(0, n_frames - f + 1, f):
        window = frames[start:start + f]
        wm = latent_weight_masks(masks[start:start + f], cfg.latent_frames, cfg.latent_height, cfg.latent_width)
        out.append(Example(clip_id, start, window, encode_frames(model, window), lm_all[start:start + f], emb,
                           ids, mask, torch.from_numpy(wm)))
    return out


def manifest_examples(model: PortraitDiT, root, entry: ClipManifest, prompt: str = DEFAULT_PROMPT,
                      flow_to_intensity: float = DEFAULT_FLOW_TO_INTENSITY) -> list[Example]:
    root = Path(root)
    frames, _ = load_frames(root / entry.frames_path)
    seq = LandmarkSequence.load(root / entry.landmarks_path)
    mask_path = Path(entry.frames_path).parent / "weight_masks.npy"
    masks = np.load(root / mask_path) if (root / mask_path).exists() else None
    return clip_examples(model, entry.clip_id, frames, seq, Placement(**entry.meta["placement"]),
                         load_embedding(root, entry), prompt, flow_to_intensity, masks)


def sample_batch(examples: list[Example], batch_size: int, gen: torch.Generator) -> Batch:
    idx = torch.randint(len(examples), (batch_size,), generator=gen)
    return Batch.collate([examples[i] for i in idx.tolist()])
