"""Landmark-conditioned video diffusion transformer."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError
from .config import ModelConfig
from .identity import IdentityProjection, TextStub
from .vae import LandmarkGuider, VAEStub

GROUPS = (
    "vae_stub",
    "landmark_guider",
    "patch_embed_conv",
    "dit_blocks",
    "identity_projection",
    "text_stub",
    "output_head",
)


def sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def sincos_3d(dim: int, frames: int, rows: int, cols: int) -> torch.Tensor:
    """Fixed (frames*rows*cols, dim) encoding; each axis gets an even share of dim."""
    d_f = d_r = (dim // 3) // 2 * 2
    d_c = dim - d_f - d_r
    f, r, c = np.meshgrid(np.arange(frames), np.arange(rows), np.arange(cols), indexing="ij")
    emb = np.concatenate(
        [sincos_1d(d_f, f.ravel()), sincos_1d(d_r, r.ravel()), sincos_1d(d_c, c.ravel())], axis=1
    )
    return torch.as_tensor(emb, dtype=torch.float32)


def timestep_features(t: torch.Tensor, dim: int = 256) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = t.double()[:, None] * freqs[None]
    return torch.cat([torch.cos(ang), torch.sin(ang)], dim=1).float()


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class DiTBlock(nn.Module):
    """Full space-time self-attention + FFN, modulated by the timestep embedding."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(approximate="tanh"),
                                 nn.Linear(mlp_ratio * dim, dim))
        self.ada = nn.Linear(dim, 6 * dim)
        # Zero modulation: every block starts as the identity map.
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x, c, key_mask=None):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(F.silu(c)).chunk(6, dim=-1)
        x = x + g1.unsqueeze(1) * self.attn(modulate(self.norm1(x), sh1, sc1), key_mask)
        x = x + g2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), sh2, sc2))
        return x


class DiTBackbone(nn.Module):
    """Transformer trunk: timestep embedder, blocks and the learned null condition tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.t_embed = nn.Sequential(nn.Linear(256, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(DiTBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.null_id = nn.Parameter(torch.randn(d) * 0.02)
        self.null_text = nn.Parameter(torch.randn(d) * 0.02)


class OutputHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, p = cfg.dim, cfg.patch_size
        self.norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Linear(d, 2 * d)
        self.linear = nn.Linear(d, p * p * cfg.latent_channels)

    def forward(self, x, c):
        shift, scale = self.ada(F.silu(c)).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


@dataclass
class Conditions:
    """Everything the denoiser is conditioned on, batched along dim 0.

    Give either ``landmark_video`` (B, F, 1, H, W) rasterised frames, run
    through the guider, or a precomputed ``landmark_latent``. Rows flagged
    in ``drop`` use the null condition: zero landmark latents and learned
    null tokens for identity and text.
    """

    id_embedding: torch.Tensor
    text_ids: torch.Tensor
    text_mask: torch.Tensor
    landmark_video: torch.Tensor | None = None
    landmark_latent: torch.Tensor | None = None
    drop: torch.Tensor | None = None

    def unconditional(self) -> "Conditions":
        b = self.id_embedding.shape[0]
        return replace(self, drop=torch.ones(b, dtype=torch.bool))


class PortraitDiT(nn.Module):
    """Top-level model; each child module is one parameter group."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.vae_stub = VAEStub(cfg.image_channels, cfg.latent_channels, cfg.vae_width, cfg.spatial_stride,
                                cfg.temporal_stride)
        self.landmark_guider = LandmarkGuider(cfg.landmark_channels, cfg.vae_width, cfg.spatial_stride,
                                              cfg.temporal_stride)
        p = cfg.patch_size
        self.patch_embed_conv = nn.Conv2d(cfg.latent_channels + cfg.landmark_channels, cfg.dim, p, stride=p)
        self.dit_blocks = DiTBackbone(cfg)
        self.identity_projection = IdentityProjection(cfg.id_dim, cfg.dim)
        self.text_stub = TextStub(cfg.vocab_size, cfg.dim, cfg.text_len, seed=cfg.text_seed)
        self.output_head = OutputHead(cfg)
        hp, wp = cfg.latent_height // p, cfg.latent_width // p
        self.register_buffer("pos_video", sincos_3d(cfg.dim, cfg.latent_frames, hp, wp), persistent=False)
        self.register_buffer("pos_text", torch.as_tensor(sincos_1d(cfg.dim, np.arange(cfg.text_len)),
                                                         dtype=torch.float32), persistent=False)

    def patch_embed(self, noise_latent: torch.Tensor, landmark_latent: torch.Tensor) -> torch.Tensor:
        """Concatenate [noise | landmark] channels and patchify to (B, N*hp*wp, dim)."""
        if noise_latent.shape[:2] != landmark_latent.shape[:2] or noise_latent.shape[-2:] != landmark_latent.shape[-2:]:
            raise ShapeError(
                f"noise latent {tuple(noise_latent.shape)} and landmark latent {tuple(landmark_latent.shape)} disagree"
            )
        b, n = noise_latent.shape[:2]
        x = torch.cat([noise_latent, landmark_latent], dim=2).flatten(0, 1)
        tok = self.patch_embed_conv(x)  # (B*N, d, hp, wp)
        return tok.flatten(2).transpose(1, 2).reshape(b, -1, self.cfg.dim)

    def dit_forward(self, tokens: torch.Tensor, t: torch.Tensor, text_tokens: torch.Tensor,
                    text_mask: torch.Tensor, id_token: torch.Tensor) -> torch.Tensor:
        """Run [identity | text | video] tokens through the trunk; return (B, N, C, H', W') noise."""
        cfg = self.cfg
        b, n_vid, d = tokens.shape
        if n_vid != self.pos_video.shape[0] or d != cfg.dim:
            raise ShapeError(f"expected {self.pos_video.shape[0]} video tokens of dim {cfg.dim}, got {(n_vid, d)}")
        c = self.dit_blocks.t_embed(timestep_features(t).to(tokens.dtype))
        x = torch.cat([id_token.unsqueeze(1), text_tokens + self.pos_text.to(tokens.dtype),
                       tokens + self.pos_video.to(tokens.dtype)], dim=1)
        ones = torch.ones(b, 1, dtype=torch.bool)
        key_mask = torch.cat([ones, text_mask, ones.expand(b, n_vid)], dim=1)
        for blk in self.dit_blocks.blocks:
            x = blk(x, c, key_mask)
        out = self.output_head(x[:, -n_vid:], c)
        return self.unpatchify(out)

    def unpatchify(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        p, ch = cfg.patch_size, cfg.latent_channels
        hp, wp = cfg.latent_height // p, cfg.latent_width // p
        b = x.shape[0]
        x = x.reshape(b, cfg.latent_frames, hp, wp, p, p, ch)
        return x.permute(0, 1, 6, 2, 4, 3, 5).reshape(b, cfg.latent_frames, ch, hp * p, wp * p)

    def encode_landmarks(self, landmark_video: torch.Tensor) -> torch.Tensor:
        return self.landmark_guider(landmark_video)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: Conditions) -> torch.Tensor:
        b = x_t.shape[0]
        lm = cond.landmark_latent if cond.landmark_latent is not None else self.encode_landmarks(cond.landmark_video)
        id_tok = self.identity_projection(cond.id_embedding.to(x_t.dtype))
        text_tok = self.text_stub(cond.text_ids, cond.text_mask)
        text_mask = cond.text_mask
        if cond.drop is not None and bool(cond.drop.any()):
            keep = (~cond.drop).to(x_t.dtype)
            lm = lm * keep.view(b, 1, 1, 1, 1)
            k2 = keep.view(b, 1)
            id_tok = id_tok * k2 + self.dit_blocks.null_id * (1 - k2)
            k3 = keep.view(b, 1, 1)
            text_tok = text_tok * k3 + self.dit_blocks.null_text * (1 - k3)
            text_mask = text_mask | cond.drop.view(b, 1)
        tokens = self.patch_embed(x_t, lm)
        return self.dit_forward(tokens, t, text_tok, text_mask, id_tok)


def parameter_groups(model: nn.Module) -> dict[str, dict[str, nn.Parameter]]:
    """Partition every parameter by its top-level module name."""
    groups: dict[str, dict[str, nn.Parameter]] = {g: {} for g in GROUPS}
    for name, param in model.named_parameters():
        group, _, rest = name.partition(".")
        if group not in groups:
            raise KeyError(f"parameter {name!r} is outside the registry groups")
        groups[group][rest] = param
    return groups


def build_model(cfg: ModelConfig, seed: int = 0) -> PortraitDiT:
    torch.manual_seed(seed)
    return PortraitDiT(cfg)
