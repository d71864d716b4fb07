"""Portrait animation: reference image + driving landmarks -> generated frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datapipe.synth import placement_from_box
from .diffusion import DiffusionConfig, NoiseSchedule, ddim_sample, make_schedule
from .errors import ShapeError
from .landmarks import LandmarkSequence, Placement, rasterize_sequence
from .model.dit import Conditions, PortraitDiT
from .model.identity import FaceCrop, VisionEncoderStub, face_extract, vision_encode
from .training.data import DEFAULT_PROMPT, decode_latents


def vision_encoder_for(model: PortraitDiT) -> VisionEncoderStub:
    cfg = model.cfg
    return VisionEncoderStub(cfg.id_dim, cfg.face_size, cfg.vision_seed, cfg.image_channels)


@dataclass
class Animation:
    frames: np.ndarray  # (F, H, W, 3) float32 in [0, 1]
    latents: torch.Tensor  # (chunks, N, C, H', W')
    face: FaceCrop
    id_embedding: np.ndarray
    placement: Placement


def chunk_seed(seed: int, chunk: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(chunk)]).generate_state(1)[0])


def animate(model: PortraitDiT, reference: np.ndarray, driving: LandmarkSequence, *,
            diffusion: DiffusionConfig | None = None, sched: NoiseSchedule | None = None, seed: int = 0,
            steps: int | None = None, cfg_scale: float | None = None, prompt: str = DEFAULT_PROMPT,
            box=None, placement: Placement | None = None, encoder: VisionEncoderStub | None = None) -> Animation:
    """Animate ``reference`` with the driving landmarks, one model window at a time.

    Landmarks are placed where the reference face sits (``placement``, or
    one derived from the face box) without retargeting them to its shape.
    The driving length must be a whole number of model windows.
    """
    cfg = model.cfg
    diffusion = diffusion or DiffusionConfig()
    sched = sched or make_schedule(diffusion)
    steps = diffusion.sampler_steps if steps is None else steps
    cfg_scale = diffusion.cfg_scale if cfg_scale is None else cfg_scale
    encoder = encoder or vision_encoder_for(model)
    img = np.asarray(reference, dtype=np.float32)
    if img.shape[:2] != (cfg.pixel_height, cfg.pixel_width):
        raise ShapeError(f"reference is {img.shape[1]}x{img.shape[0]}, model works at "
                         f"{cfg.pixel_width}x{cfg.pixel_height}")
    window = cfg.pixel_frames
    if len(driving) % window:
        raise ShapeError(f"driving sequence has {len(driving)} frames, not a multiple of {window}")

    face = face_extract(img, cfg.face_size, box=box)
    emb = vision_encode(encoder, face.image)
    placement = placement or placement_from_box(face.box)
    raster = torch.from_numpy(rasterize_sequence(driving, placement, cfg.pixel_width, cfg.pixel_height,
                                                 cfg.landmark_radius))[:, None]
    ids, mask = model.text_stub.tokenize(prompt)
    clip = model.vae_stub.latent_bounds() if diffusion.clip_denoised else None
    latents = []
    for k in range(len(driving) // window):
        cond = Conditions(torch.from_numpy(emb)[None], ids[None], mask[None],
                          landmark_video=raster[k * window:(k + 1) * window][None])
        z = ddim_sample(model, cond, sched, steps, chunk_seed(seed, k), (1, *cfg.latent_shape),
                        cfg_scale=cfg_scale, uncond_conditions=cond.unconditional(), clip_x0=clip)
        latents.append(z[0])
    lat = torch.stack(latents)
    frames = decode_latents(model, lat).reshape(-1, cfg.pixel_height, cfg.pixel_width, cfg.image_channels)
    return Animation(np.ascontiguousarray(frames, dtype=np.float32), lat, face, emb, placement)
