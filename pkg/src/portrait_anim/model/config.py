from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from ..errors import ConfigError


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults are the desk-scale model."""

    latent_channels: int = 4
    latent_frames: int = 8
    latent_height: int = 16
    latent_width: int = 16
    patch_size: int = 2
    dim: int = 128
    heads: int = 4
    depth: int = 4
    id_dim: int = 64
    landmark_channels: int = 4
    text_len: int = 8
    vocab_size: int = 1024
    image_channels: int = 3
    spatial_stride: int = 4
    temporal_stride: int = 2
    vae_width: int = 32
    face_size: int = 32
    mlp_ratio: int = 4
    landmark_radius: float = 1.0
    vision_seed: int = 7
    text_seed: int = 11

    @classmethod
    def tiny(cls) -> "ModelConfig":
        return cls(latent_frames=4, latent_height=8, latent_width=8, dim=64, heads=4, depth=2, id_dim=32,
                   vae_width=16, face_size=24)

    @property
    def pixel_frames(self) -> int:
        return self.latent_frames * self.temporal_stride

    @property
    def pixel_height(self) -> int:
        return self.latent_height * self.spatial_stride

    @property
    def pixel_width(self) -> int:
        return self.latent_width * self.spatial_stride

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.latent_frames, self.latent_channels, self.latent_height, self.latent_width)

    @property
    def tokens_per_frame(self) -> int:
        return (self.latent_height // self.patch_size) * (self.latent_width // self.patch_size)

    def validate(self) -> "ModelConfig":
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.latent_height % self.patch_size or self.latent_width % self.patch_size:
            raise ConfigError("latent height/width must be divisible by patch size")
        for name in ("spatial_stride", "temporal_stride"):
            s = getattr(self, name)
            if s < 1 or s & (s - 1):
                raise ConfigError(f"{name} must be a power of two, got {s}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d).validate()
