"""Causal 3D convolutional encoders: the VAE stub and the landmark guider."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError


class CausalConv3d(nn.Module):
    """Conv3d whose temporal receptive field only looks backwards.

    The temporal axis is zero-padded by ``kt - 1`` on the past side, so the
    output at index j sees input frames ``j*st - kt + 1 .. j*st``.
    """

    def __init__(self, in_ch, out_ch, kernel=(3, 3, 3), stride=(1, 1, 1)):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.conv = nn.Conv3d(in_ch, out_ch, kernel, stride=stride)

    def forward(self, x):
        kt, kh, kw = self.kernel
        x = F.pad(x, (kw // 2, kw // 2, kh // 2, kh // 2, kt - 1, 0))
        return self.conv(x)


def _stage_strides(spatial_stride: int, temporal_stride: int) -> list[tuple[int, int]]:
    n_s = int(math.log2(spatial_stride))
    n_t = int(math.log2(temporal_stride))
    n = max(n_s, n_t)
    # Temporal downsampling happens in the later stages.
    return [(2 if i >= n - n_t else 1, 2 if i < n_s else 1) for i in range(n)]


class CausalEncoder3D(nn.Module):
    """Strided causal conv stack mapping (B, F, C_in, H, W) to (B, F/st, C_out, H/ss, W/ss)."""

    def __init__(self, in_ch: int, out_ch: int, width: int, spatial_stride: int = 4, temporal_stride: int = 2):
        super().__init__()
        self.spatial_stride = spatial_stride
        self.temporal_stride = temporal_stride
        layers = []
        ch = in_ch
        for i, (st, ss) in enumerate(_stage_strides(spatial_stride, temporal_stride)):
            nxt = width * min(2 ** i, 4)
            layers.append(CausalConv3d(ch, nxt, (3, 3, 3), (st, ss, ss)))
            ch = nxt
        layers.append(CausalConv3d(ch, ch, (3, 3, 3)))
        self.convs = nn.ModuleList(layers)
        self.conv_out = CausalConv3d(ch, out_ch, (1, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, f, c, h, w = x.shape
        if f % self.temporal_stride or h % self.spatial_stride or w % self.spatial_stride:
            raise ShapeError(
                f"input (F={f}, H={h}, W={w}) not divisible by strides "
                f"(t={self.temporal_stride}, s={self.spatial_stride})"
            )
        x = x.permute(0, 2, 1, 3, 4)
        for conv in self.convs:
            x = F.silu(conv(x))
        x = self.conv_out(x)
        return x.permute(0, 2, 1, 3, 4)

    def last_input_frame(self, n: int) -> int:
        """Index of the latest input frame that latent frame ``n`` can depend on."""
        end = n
        for conv in reversed(list(self.convs) + [self.conv_out]):
            end *= conv.stride[0]
        return end


class Decoder3D(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, width: int, spatial_stride: int = 4, temporal_stride: int = 2):
        super().__init__()
        self.factors = list(reversed(_stage_strides(spatial_stride, temporal_stride)))
        self.conv_in = nn.Conv3d(in_ch, 2 * width, 3, padding=1)
        self.ups = nn.ModuleList(nn.Conv3d(2 * width, 2 * width, 3, padding=1) for _ in self.factors)
        self.conv_out = nn.Conv3d(2 * width, out_ch, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = F.silu(self.conv_in(z.permute(0, 2, 1, 3, 4)))
        for (st, ss), conv in zip(self.factors, self.ups):
            x = F.interpolate(x, scale_factor=(st, ss, ss), mode="nearest")
            x = F.silu(conv(x))
        x = torch.sigmoid(self.conv_out(x))
        return x.permute(0, 2, 1, 3, 4)


class VAEStub(nn.Module):
    """Deterministic autoencoder standing in for the pretrained video VAE.

    Latents are divided by ``latent_scale`` (set after pretraining) so the
    diffusion model sees roughly unit-variance inputs. ``latent_lo`` and
    ``latent_hi`` hold the per-channel range of scaled training latents and
    bound x_0 estimates during sampling.
    """

    def __init__(self, image_channels: int, latent_channels: int, width: int, spatial_stride: int,
                 temporal_stride: int):
        super().__init__()
        self.encoder = CausalEncoder3D(image_channels, latent_channels, width, spatial_stride, temporal_stride)
        self.decoder = Decoder3D(latent_channels, image_channels, width, spatial_stride, temporal_stride)
        self.register_buffer("latent_scale", torch.ones(()))
        self.register_buffer("latent_lo", torch.full((latent_channels,), -float("inf")))
        self.register_buffer("latent_hi", torch.full((latent_channels,), float("inf")))

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        return self.encoder(frames) / self.latent_scale

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return self.decoder(latents * self.latent_scale)

    def forward(self, frames):
        return self.decode(self.encode(frames))

    def latent_bounds(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(lo, hi) shaped to broadcast over (B, N, C, H', W') latents."""
        shape = (1, 1, -1, 1, 1)
        return self.latent_lo.view(shape), self.latent_hi.view(shape)


class LandmarkGuider(CausalEncoder3D):
    """Causal encoder projecting rasterised landmark frames into latent space."""

    def __init__(self, landmark_channels: int, width: int, spatial_stride: int, temporal_stride: int):
        super().__init__(1, landmark_channels, width, spatial_stride, temporal_stride)

    @torch.no_grad()
    def init_from_encoder(self, encoder: CausalEncoder3D) -> None:
        """Copy a pretrained image encoder, folding its colour input weights to one channel."""
        src = encoder.state_dict()
        dst = self.state_dict()
        for key, val in src.items():
            if key == "convs.0.conv.weight":
                val = val.sum(dim=1, keepdim=True)
            if dst[key].shape == val.shape:
                dst[key] = val.clone()
        self.load_state_dict(dst)
