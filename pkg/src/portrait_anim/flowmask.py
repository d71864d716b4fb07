"""Optical flow, motion masks and the flow-weighted noise loss.

Flow is estimated with coarse-to-fine block matching. Motion masks follow
the mean-threshold rule: a pixel is foreground when its flow magnitude
strictly exceeds the frame's mean magnitude, and the foreground magnitudes
(in 0-255 intensity units) are mapped into loss weights in [1.0, 1.5].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ShapeError

WEIGHT_MIN = 1.0
WEIGHT_MAX = 1.5
DEFAULT_FLOW_TO_INTENSITY = 25.5  # 10 px of motion saturates the weight

FLOW_MAGIC = b"SKA1FLOW"
FLOW_VERSION = 1


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ShapeError(f"flow components must be matching 2-D arrays, got {self.u.shape}, {self.v.shape}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow field contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))


@dataclass
class FlowMaskBundle:
    magnitude: np.ndarray
    tau: float
    binary_mask: np.ndarray
    foreground_count: int
    foreground_mean: float
    weight_mask: np.ndarray


# ---------------------------------------------------------------------------
# Flow estimation
# ---------------------------------------------------------------------------

def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _parabolic_offset(c_minus: np.ndarray, c0: np.ndarray, c_plus: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = c_minus - 2.0 * c0 + c_plus
        denom = np.where(np.isfinite(denom), denom, 0.0)
        off = np.where(denom > 1e-12, (c_minus - c_plus) / (2.0 * denom), 0.0)
    # An exact match is already the true optimum.
    off = np.where(c0 <= 1e-12 * (c_minus + c_plus), 0.0, off)
    return np.clip(off, -0.5, 0.5)


def _median3(vectors: np.ndarray) -> np.ndarray:
    """Componentwise 3x3 median over the block grid (edge blocks use what exists)."""
    nby, nbx = vectors.shape[:2]
    if nby * nbx == 1:
        return vectors
    padded = np.pad(vectors, ((1, 1), (1, 1), (0, 0)), constant_values=np.nan)
    stack = np.stack([padded[i:i + nby, j:j + nbx] for i in range(3) for j in range(3)])
    return np.nanmedian(stack, axis=0)


def _match_level(a: np.ndarray, b: np.ndarray, prior: np.ndarray, block: int, radius: int,
                 subpixel: bool) -> np.ndarray:
    """Block-match ``a`` against ``b`` around an integer prior flow (H, W, 2)."""
    h, w = a.shape
    nby, nbx = -(-h // block), -(-w // block)
    ph, pw = nby * block, nbx * block
    a_pad = np.pad(a, ((0, ph - h), (0, pw - w)), mode="edge")
    prior_pad = np.pad(prior, ((0, ph - h), (0, pw - w), (0, 0)), mode="edge")
    block_prior = np.rint(prior_pad.reshape(nby, block, nbx, block, 2).mean(axis=(1, 3))).astype(np.int64)

    # Samples outside frame_b are unknown (NaN) and excluded from the cost.
    margin = radius + 1 + int(np.abs(block_prior).max(initial=0))
    b_pad = np.pad(b, ((margin, margin + ph - h), (margin, margin + pw - w)), constant_values=np.nan)
    a_valid = np.zeros((ph, pw), dtype=bool)
    a_valid[:h, :w] = True

    by = np.arange(nby)[:, None, None, None] * block + np.arange(block)[None, None, :, None]
    bx = np.arange(nbx)[None, :, None, None] * block + np.arange(block)[None, None, None, :]
    base_r = by + block_prior[..., 1][:, :, None, None] + margin
    base_c = bx + block_prior[..., 0][:, :, None, None] + margin
    a_blocks = a_pad.reshape(nby, block, nbx, block).transpose(0, 2, 1, 3)
    a_valid = a_valid.reshape(nby, block, nbx, block).transpose(0, 2, 1, 3)
    min_valid = block * block // 2

    span = np.arange(-radius - 1, radius + 2)
    n = span.size
    cost = np.empty((nby, nbx, n, n))
    for iy, dy in enumerate(span):
        for ix, dx in enumerate(span):
            diff = a_blocks - b_pad[base_r + dy, base_c + dx]
            valid = a_valid & ~np.isnan(diff)
            diff = np.where(valid, diff, 0.0)
            count = valid.sum(axis=(2, 3))
            ssd = np.einsum("ijkl,ijkl->ij", diff, diff)
            cost[:, :, iy, ix] = np.where(count >= min_valid, ssd / np.maximum(count, 1), np.inf)

    inner = cost[:, :, 1:-1, 1:-1]
    dy_grid, dx_grid = np.meshgrid(span[1:-1], span[1:-1], indexing="ij")
    dist2 = (dy_grid ** 2 + dx_grid ** 2).astype(np.float64)
    cmin = inner.min(axis=(2, 3), keepdims=True)
    near_min = inner <= cmin + 1e-10 * (1.0 + cmin)
    best = np.where(near_min, dist2, np.inf).reshape(nby, nbx, -1).argmin(axis=2)
    iy, ix = np.unravel_index(best, dist2.shape)
    iy, ix = iy + 1, ix + 1

    flow_blocks = np.stack([span[ix], span[iy]], axis=-1).astype(np.float64)
    if subpixel:
        jj, kk = np.meshgrid(np.arange(nby), np.arange(nbx), indexing="ij")
        c0 = cost[jj, kk, iy, ix]
        flow_blocks[..., 0] += _parabolic_offset(cost[jj, kk, iy, ix - 1], c0, cost[jj, kk, iy, ix + 1])
        flow_blocks[..., 1] += _parabolic_offset(cost[jj, kk, iy - 1, ix], c0, cost[jj, kk, iy + 1, ix])
    flow_blocks += block_prior
    flow_blocks = _median3(flow_blocks)
    dense = np.repeat(np.repeat(flow_blocks, block, axis=0), block, axis=1)
    return dense[:h, :w]


def estimate_flow(frame_a: np.ndarray, frame_b: np.ndarray, levels: int = 3, block: int = 8,
                  radius: int = 4) -> FlowField:
    """Dense flow mapping ``frame_a`` onto ``frame_b``.

    A pixel at (x, y) in ``frame_a`` is matched at (x + u, y + v) in
    ``frame_b``. Each pyramid level searches +/- ``radius`` pixels around
    the upsampled coarser estimate; the finest level adds a parabolic
    sub-pixel fit of the matching cost.
    """
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"frames differ in shape: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeError("estimate_flow expects single-channel frames")

    pyr_a, pyr_b = [a], [b]
    while len(pyr_a) < levels and min(pyr_a[-1].shape) >= 2 * block:
        pyr_a.append(_downsample(pyr_a[-1]))
        pyr_b.append(_downsample(pyr_b[-1]))

    flow = np.zeros(pyr_a[-1].shape + (2,))
    for lvl in range(len(pyr_a) - 1, -1, -1):
        la, lb = pyr_a[lvl], pyr_b[lvl]
        if flow.shape[:2] != la.shape:
            up = 2.0 * np.repeat(np.repeat(flow, 2, axis=0), 2, axis=1)
            up = np.pad(up, ((0, max(0, la.shape[0] - up.shape[0])), (0, max(0, la.shape[1] - up.shape[1])), (0, 0)),
                        mode="edge")
            flow = up[: la.shape[0], : la.shape[1]]
        flow = _match_level(la, lb, flow, block, radius, subpixel=lvl == 0)
    return FlowField(flow[..., 0], flow[..., 1])


def to_gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    return frame @ np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def flow_threshold(flow: FlowField) -> tuple[np.ndarray, float]:
    magnitude = np.hypot(flow.u, flow.v)
    return magnitude, float(magnitude.mean())


def binary_mask(magnitude: np.ndarray, tau: float) -> np.ndarray:
    if tau < 0:
        raise ValueError("threshold must be non-negative")
    return (np.asarray(magnitude) > tau).astype(np.uint8)


def foreground_mean(flow_magnitude: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean magnitude over foreground pixels and the masked magnitude field.

    With no foreground pixels the mean is defined as 0 and the masked field
    is all zero, so every weight falls back to the lower bound.
    """
    flow_magnitude = np.asarray(flow_magnitude, dtype=np.float64)
    mask = np.asarray(mask)
    if flow_magnitude.shape != mask.shape:
        raise ShapeError(f"magnitude {flow_magnitude.shape} and mask {mask.shape} differ")
    masked = flow_magnitude * mask
    count = int(mask.sum())
    if count == 0:
        return 0.0, np.zeros_like(masked)
    return float(masked.sum() / count), masked


def normalized_mask(masked_field: np.ndarray) -> np.ndarray:
    """Loss weights ``clip(value / 255 + 0.5, 1.0, 1.5)``; values in 0-255 units."""
    return np.clip(np.asarray(masked_field, dtype=np.float64) / 255.0 + 0.5, WEIGHT_MIN, WEIGHT_MAX)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, n_in + 1)[None, :])
    overlap = np.clip(hi - lo, 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def resize_mask_to_latent(weight_mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-averaged resize of a 2-D mask."""
    weight_mask = np.asarray(weight_mask, dtype=np.float64)
    if out_h <= 0 or out_w <= 0:
        raise ValueError("target size must be positive")
    h, w = weight_mask.shape
    if (h, w) == (out_h, out_w):
        return weight_mask.copy()
    out = _area_matrix(h, out_h) @ weight_mask @ _area_matrix(w, out_w).T
    # Guard against round-off drifting past the input range.
    return np.clip(out, weight_mask.min(), weight_mask.max())


def flow_mask_bundle(flow: FlowField, flow_to_intensity: float = DEFAULT_FLOW_TO_INTENSITY) -> FlowMaskBundle:
    magnitude, tau = flow_threshold(flow)
    mask = binary_mask(magnitude, tau)
    f_fg, masked = foreground_mean(magnitude, mask)
    weights = normalized_mask(masked * flow_to_intensity)
    return FlowMaskBundle(magnitude, tau, mask, int(mask.sum()), f_fg, weights)


def clip_weight_masks(frames: np.ndarray, flow_to_intensity: float = DEFAULT_FLOW_TO_INTENSITY,
                      flows: list[FlowField] | None = None) -> tuple[np.ndarray, list[FlowMaskBundle | None]]:
    """Pixel-resolution weight masks for every frame of a clip.

    Frame i uses the flow from frame i-1 to frame i; frame 0 has no
    predecessor and gets a uniform 1.0 mask. Precomputed ``flows`` (one per
    consecutive pair) bypass the estimator.
    """
    frames = np.asarray(frames)
    n = frames.shape[0]
    h, w = frames.shape[1:3]
    masks = np.ones((n, h, w))
    bundles: list[FlowMaskBundle | None] = [None]
    if flows is not None and len(flows) != n - 1:
        raise ValueError(f"expected {n - 1} precomputed flows, got {len(flows)}")
    for i in range(1, n):
        flow = flows[i - 1] if flows is not None else estimate_flow(to_gray(frames[i - 1]), to_gray(frames[i]))
        bundle = flow_mask_bundle(flow, flow_to_intensity)
        masks[i] = bundle.weight_mask
        bundles.append(bundle)
    return masks, bundles


def latent_weight_masks(masks: np.ndarray, n_latent: int, out_h: int, out_w: int) -> np.ndarray:
    """Pool (F, H, W) pixel masks to (N, H', W') by averaging F/N consecutive frames."""
    masks = np.asarray(masks, dtype=np.float64)
    f = masks.shape[0]
    if f % n_latent:
        raise ShapeError(f"{f} frames do not pool evenly into {n_latent} latent frames")
    pooled = masks.reshape(n_latent, f // n_latent, *masks.shape[1:]).mean(axis=1)
    return np.stack([resize_mask_to_latent(m, out_h, out_w) for m in pooled])


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def face_aware_loss(eps_true, eps_pred, weight_masks) -> torch.Tensor:
    """Mask-weighted squared noise error averaged over frames and positions.

    ``eps_*`` are (..., N, C, H', W') or (..., N, H', W'); weights are
    (..., N, H', W'). Multi-channel errors are averaged over channels before
    weighting. The reduction runs in float64.
    """
    eps_true = torch.as_tensor(eps_true)
    eps_pred = torch.as_tensor(eps_pred)
    weights = torch.as_tensor(weight_masks)
    if eps_true.shape != eps_pred.shape:
        raise ShapeError(f"eps shapes differ: {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}")
    sq = (eps_true.double() - eps_pred.double()) ** 2
    if sq.dim() == weights.dim() + 1:
        sq = sq.mean(dim=-3)
    if sq.shape != weights.shape:
        raise ShapeError(f"weights {tuple(weights.shape)} do not match error field {tuple(sq.shape)}")
    w = weights.double()
    if w.numel() and (w.min() < WEIGHT_MIN or w.max() > WEIGHT_MAX):
        raise ValueError("weight masks must lie in [1.0, 1.5]")
    return (w * sq).mean()


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_flow(path, flow: FlowField) -> None:
    h, w = flow.shape
    header = FLOW_MAGIC + struct.pack("<III", h, w, FLOW_VERSION)
    body = np.stack([flow.u, flow.v], axis=-1).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_flow(path) -> FlowField:
    data = Path(path).read_bytes()
    if data[:8] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a flow file")
    h, w, version = struct.unpack("<III", data[8:20])
    if version != FLOW_VERSION:
        raise ValueError(f"{path}: unsupported flow version {version}")
    arr = np.frombuffer(data, dtype="<f4", offset=20)
    if arr.size != h * w * 2:
        raise ValueError(f"{path}: truncated flow payload")
    arr = arr.reshape(h, w, 2).astype(np.float64)
    return FlowField(arr[..., 0], arr[..., 1])


def write_weight_pgm(path, weight_mask: np.ndarray) -> None:
    """Debug export: 1.0 maps to black, 1.5 to white."""
    scaled = np.rint((np.asarray(weight_mask) - WEIGHT_MIN) / (WEIGHT_MAX - WEIGHT_MIN) * 255.0)
    Image.fromarray(np.clip(scaled, 0, 255).astype(np.uint8), mode="L").save(path, format="PPM")
