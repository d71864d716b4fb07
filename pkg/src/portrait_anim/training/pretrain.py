"""Stub pretraining: the frozen autoencoder and the base denoiser the stages start from."""

from __future__ import annotations

import logging

import numpy as np
import torch

from ..diffusion import NoiseSchedule
from ..model.dit import PortraitDiT
from .data import Example, sample_batch
from .optim import AdamW
from .stages import select_groups
from .trainer import compute_loss

log = logging.getLogger(__name__)

BACKBONE_GROUPS = ("patch_embed_conv", "dit_blocks", "output_head")


def _windows(clips: list[np.ndarray], n: int) -> torch.Tensor:
    out = [c[s:s + n] for c in clips for s in range(0, c.shape[0] - n + 1, n)]
    if not out:
        raise ValueError(f"no clip is long enough for a {n}-frame window")
    return torch.from_numpy(np.ascontiguousarray(np.stack(out), dtype=np.float32)).permute(0, 1, 4, 2, 3)


@torch.no_grad()
def reconstruction_mse(model: PortraitDiT, clips: list[np.ndarray]) -> float:
    x = _windows(clips, model.cfg.pixel_frames)
    return float(((model.vae_stub(x) - x) ** 2).mean())


def pretrain_vae(model: PortraitDiT, clips: list[np.ndarray], steps: int, lr: float = 2e-3, batch_size: int = 4,
                 seed: int = 0, heldout: list[np.ndarray] | None = None) -> dict:
    """Fit the autoencoder by reconstruction, set the latent scale and seed the guider from the encoder."""
    x = _windows(clips, model.cfg.pixel_frames)
    vae = model.vae_stub
    params = select_groups(model, ("vae_stub",))
    opt = AdamW(params, lr, weight_decay=0.0)
    gen = torch.Generator().manual_seed(seed)
    vae.latent_scale.fill_(1.0)
    vae.train()
    for step in range(steps):
        idx = torch.randint(x.shape[0], (batch_size,), generator=gen)
        opt.zero_grad()
        loss = ((vae(x[idx]) - x[idx]) ** 2).mean()
        loss.backward()
        opt.step()
    opt.zero_grad()
    vae.eval()
    select_groups(model, ())
    with torch.no_grad():
        z = vae.encoder(x)
        vae.latent_scale.fill_(float(z.std()))
        scaled = z / vae.latent_scale
        vae.latent_lo.copy_(scaled.amin(dim=(0, 1, 3, 4)))
        vae.latent_hi.copy_(scaled.amax(dim=(0, 1, 3, 4)))
        model.landmark_guider.init_from_encoder(vae.encoder)
    report = {"train_mse": reconstruction_mse(model, clips), "latent_scale": float(vae.latent_scale)}
    if heldout:
        report["heldout_mse"] = reconstruction_mse(model, heldout)
    log.info("vae pretraining: %s", report)
    return report


def pretrain_backbone(model: PortraitDiT, examples: list[Example], sched: NoiseSchedule, steps: int,
                      lr: float = 1e-3, batch_size: int = 4, seed: int = 0) -> list[float]:
    """Train the denoiser trunk on unconditioned clips.

    Every row uses the null condition, so the landmark input channels of the
    patch embedding receive no signal; they are zeroed afterwards, leaving the
    pretrained behaviour unchanged until stage 1 learns them.
    """
    params = select_groups(model, BACKBONE_GROUPS)
    opt = AdamW(params, lr, weight_decay=0.0)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    model.train()
    for _ in range(steps):
        batch = sample_batch(examples, batch_size, gen)
        opt.zero_grad()
        loss, _ = compute_loss(model, batch, sched, gen, 0.0, drop_all=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    opt.zero_grad()
    model.eval()
    select_groups(model, ())
    with torch.no_grad():
        model.patch_embed_conv.weight[:, model.cfg.latent_channels:] = 0.0
    return losses
