"""Noise schedule, forward noising, noise objective and DDIM sampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Callable

import numpy as np
import torch

from .errors import ConfigError, SamplingError, ShapeError

SCHEDULES = ("linear",)


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    loss_weight: float = 1.0
    cfg_scale: float = 3.0
    sampler_steps: int = 50
    schedule: str = "linear"
    clip_denoised: bool = True  # bound x_0 estimates by the latent range seen in training

    def validate(self) -> "DiffusionConfig":
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        if not 0.0 < self.beta_min <= self.beta_max < 1.0:
            raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {self.beta_min}, {self.beta_max}")
        if not 1 <= self.sampler_steps <= self.T:
            raise ConfigError(f"sampler_steps must be in [1, T], got {self.sampler_steps}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown diffusion config keys {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def make_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    cfg.validate()
    betas = np.linspace(cfg.beta_min, cfg.beta_max, cfg.T, dtype=np.float64)
    alphas_bar = np.cumprod(1.0 - betas)
    prev = np.concatenate([[1.0], alphas_bar[:-1]])
    posterior_var = (1.0 - prev) / (1.0 - alphas_bar) * betas
    return NoiseSchedule(betas, alphas_bar, posterior_var)


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule values at ``t`` (int or (B,) tensor) and broadcast over ``like``."""
    t = torch.as_tensor(t)
    out = torch.as_tensor(values, dtype=like.dtype)[t]
    return out.reshape(out.shape + (1,) * (like.dim() - out.dim()))


def add_noise(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Sample q(x_t | x_0) given fixed noise. ``t`` may be an int or a per-sample (B,) tensor."""
    if eps.shape != x0.shape:
        raise ShapeError(f"noise {tuple(eps.shape)} does not match latent {tuple(x0.shape)}")
    t_arr = torch.as_tensor(t)
    if t_arr.numel() and (int(t_arr.min()) < 0 or int(t_arr.max()) >= sched.T):
        raise ValueError(f"timestep out of range [0, {sched.T})")
    ab = _coef(sched.alphas_bar, t_arr, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def predict_x0(x_t: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    ab = _coef(sched.alphas_bar, t, x_t)
    return (x_t - (1.0 - ab).sqrt() * eps) / ab.sqrt()


def noise_loss(eps_true, eps_pred, w: float = 1.0) -> torch.Tensor:
    eps_true = torch.as_tensor(eps_true)
    eps_pred = torch.as_tensor(eps_pred)
    if eps_true.shape != eps_pred.shape:
        raise ShapeError(f"eps shapes differ: {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}")
    return w * ((eps_true.double() - eps_pred.double()) ** 2).mean()


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError("conditional and unconditional predictions differ in shape")
    # The endpoints are returned verbatim so they hold bit-exactly.
    if scale == 1.0:
        return eps_cond.clone()
    if scale == 0.0:
        return eps_uncond.clone()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending, evenly spaced subsequence of [0, T) that always starts at T-1."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    ts = np.rint(np.linspace(T - 1, 0, steps)).astype(np.int64) if steps > 1 else np.array([T - 1])
    return ts


NoisePredictor = Callable[[torch.Tensor, torch.Tensor, Any], torch.Tensor]


@torch.no_grad()
def ddim_sample(model: NoisePredictor, conditions, sched: NoiseSchedule, steps: int, seed: int,
                shape: tuple[int, ...], cfg_scale: float = 1.0, uncond_conditions=None,
                dtype: torch.dtype = torch.float32, x_T: torch.Tensor | None = None,
                clip_x0=None) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM from seeded Gaussian noise to an x_0 estimate.

    ``model(x_t, t, conditions)`` returns predicted noise with the shape of
    ``x_t``; ``t`` is passed as a (B,) long tensor. Guidance is active when
    ``uncond_conditions`` is given and ``cfg_scale != 1``, costing two model
    calls per step. With ``clip_x0`` (a bound ``c`` or a ``(lo, hi)`` pair of
    scalars or tensors broadcastable to ``x``) each x_0 estimate is clamped
    and the noise re-derived from it, which keeps large early-step errors
    (where alpha_bar is tiny) from compounding.
    """
    if x_T is None:
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(shape, generator=gen, dtype=dtype)
    else:
        x = x_T.clone()
    guided = uncond_conditions is not None and cfg_scale != 1.0
    ts = ddim_timesteps(sched.T, steps)
    lo = hi = None
    if clip_x0 is not None:
        lo, hi = clip_x0 if isinstance(clip_x0, (tuple, list)) else (-clip_x0, clip_x0)
        lo = torch.as_tensor(lo, dtype=x.dtype)
        hi = torch.as_tensor(hi, dtype=x.dtype)
    ab_all = torch.as_tensor(sched.alphas_bar, dtype=x.dtype)
    for i, t in enumerate(ts):
        t_vec = torch.full((x.shape[0],), int(t), dtype=torch.long)
        eps = model(x, t_vec, conditions)
        if eps.shape != x.shape:
            raise SamplingError(f"model returned {tuple(eps.shape)}, expected {tuple(x.shape)}")
        if guided:
            eps_u = model(x, t_vec, uncond_conditions)
            if eps_u.shape != x.shape:
                raise SamplingError(f"model returned {tuple(eps_u.shape)}, expected {tuple(x.shape)}")
            eps = cfg_combine(eps_u, eps, cfg_scale)
        ab_t = ab_all[int(t)]
        ab_prev = ab_all[int(ts[i + 1])] if i + 1 < len(ts) else torch.ones((), dtype=x.dtype)
        x0 = (x - (1.0 - ab_t).sqrt() * eps) / ab_t.sqrt()
        if lo is not None:
            x0 = torch.minimum(torch.maximum(x0, lo), hi)
            eps = (x - ab_t.sqrt() * x0) / (1.0 - ab_t).sqrt()
        x = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps
    return x
