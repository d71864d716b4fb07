"""Face extraction, the vision-encoder stub, identity projection and the text stub."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from ..errors import FaceNotFoundError, ShapeError

Box = tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)

FACE_THRESHOLD = 0.5
MIN_FACE_AREA = 9
MIN_FILL_RATIO = 0.55  # a filled ellipse covers ~0.785 of its bounding box


@dataclass
class FaceCrop:
    image: np.ndarray  # (size, size, C) float in [0, 1]
    box: Box


def detect_faces(image: np.ndarray) -> list[Box]:
    """Bright, roughly elliptical connected regions, largest first."""
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=-1) if img.ndim == 3 else img
    labels, n = ndimage.label(gray > FACE_THRESHOLD)
    boxes = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        region = labels[sl] == idx
        # Holes (eyes, mouth) count towards the face area.
        area = int(ndimage.binary_fill_holes(region).sum())
        if area < MIN_FACE_AREA or area / region.size < MIN_FILL_RATIO:
            continue
        ys, xs = sl
        boxes.append((area, (xs.start, ys.start, xs.stop, ys.stop)))
    boxes.sort(key=lambda item: (-item[0], item[1]))
    return [b for _, b in boxes]


def square_box(box, width: int, height: int) -> Box:
    """Smallest square around ``box``, shifted (and if needed shrunk) to fit the image."""
    x0, y0, x1, y1 = box
    side = min(max(x1 - x0, y1 - y0), width, height)
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    sx = int(np.clip(np.floor(cx - side / 2.0 + 0.5), 0, width - side))
    sy = int(np.clip(np.floor(cy - side / 2.0 + 0.5), 0, height - side))
    return (sx, sy, sx + side, sy + side)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    t = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).numpy().clip(0.0, 1.0)


def face_extract(reference: np.ndarray, size: int, box=None) -> FaceCrop:
    """Locate the face (metadata ``box`` if given, else the detector) and crop a square.

    Raises FaceNotFoundError when no face-like region exists.
    """
    img = np.asarray(reference, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    if box is None:
        found = detect_faces(img)
        if not found:
            raise FaceNotFoundError("no bright elliptical face region in the reference image")
        box = found[0]
    box = square_box(box, w, h)
    x0, y0, x1, y1 = box
    return FaceCrop(resize_image(img[y0:y1, x0:x1], size), box)


class VisionEncoderStub(nn.Module):
    """Fixed random conv encoder with three linear heads.

    ``primary`` feeds the identity projection; ``arc`` and ``cur`` are the
    two variants reported by the identity-similarity metric. All biases are
    zero and all nonlinearities are ReLU, so a black image embeds to zero.
    """

    def __init__(self, id_dim: int, input_size: int, seed: int = 7, channels: int = 3):
        super().__init__()
        self.input_size = input_size
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(channels, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.primary = nn.Linear(32 * 4, id_dim)
        self.arc = nn.Linear(32 * 4, id_dim)
        self.cur = nn.Linear(32 * 4, id_dim)
        with torch.no_grad():
            for mod in (self.conv1, self.conv2, self.primary, self.arc, self.cur):
                fan_in = mod.weight[0].numel()
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                mod.bias.zero_()
        self.requires_grad_(False)

    def features(self, faces: torch.Tensor) -> torch.Tensor:
        if faces.shape[-2:] != (self.input_size, self.input_size):
            raise ShapeError(f"encoder expects {self.input_size}x{self.input_size} faces, got {tuple(faces.shape[-2:])}")
        x = F.relu(self.conv1(faces))
        x = F.relu(self.conv2(x))
        return F.adaptive_avg_pool2d(x, 2).flatten(1)

    def forward(self, faces: torch.Tensor) -> torch.Tensor:
        return self.primary(self.features(faces))

    def heads(self, faces: torch.Tensor) -> dict[str, torch.Tensor]:
        feats = self.features(faces)
        return {"primary": self.primary(feats), "arc": self.arc(feats), "cur": self.cur(feats)}


def _faces_tensor(faces) -> torch.Tensor:
    arr = np.asarray(faces, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)


@torch.no_grad()
def vision_encode(encoder: VisionEncoderStub, face: np.ndarray) -> np.ndarray:
    """Embedding of one (size, size, C) face crop, or a stack of them."""
    out = encoder(_faces_tensor(face)).numpy()
    return out[0] if np.asarray(face).ndim == 3 else out


@torch.no_grad()
def vision_encode_heads(encoder: VisionEncoderStub, faces: np.ndarray) -> dict[str, np.ndarray]:
    return {k: v.numpy() for k, v in encoder.heads(_faces_tensor(faces)).items()}


class IdentityProjection(nn.Module):
    """Two-layer MLP mapping face embeddings into the text-token space."""

    def __init__(self, id_dim: int, dim: int):
        super().__init__()
        self.id_dim = id_dim
        self.fc1 = nn.Linear(id_dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, f_id: torch.Tensor) -> torch.Tensor:
        if f_id.shape[-1] != self.id_dim:
            raise ShapeError(f"identity embedding has dim {f_id.shape[-1]}, expected {self.id_dim}")
        return self.fc2(F.gelu(self.fc1(f_id)))


def _word_id(word: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return 1 + int.from_bytes(digest, "little") % (vocab_size - 1)


class TextStub(nn.Module):
    """Hashed word-embedding table standing in for a pretrained text encoder.

    Id 0 is padding; padded positions embed to zero and are masked out.
    """

    def __init__(self, vocab_size: int, dim: int, max_len: int, seed: int = 11):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        gen = torch.Generator().manual_seed(seed)
        self.table = nn.Parameter(torch.randn(vocab_size, dim, generator=gen) * 0.5)

    def tokenize(self, prompt: str) -> tuple[torch.Tensor, torch.Tensor]:
        words = prompt.split()[: self.max_len]
        ids = torch.zeros(self.max_len, dtype=torch.long)
        if words:
            ids[: len(words)] = torch.tensor([_word_id(w, self.vocab_size) for w in words])
        return ids, ids != 0

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.table[ids] * mask.unsqueeze(-1).to(self.table.dtype)

    def encode(self, prompt: str) -> tuple[torch.Tensor, torch.Tensor]:
        ids, mask = self.tokenize(prompt)
        return self(ids, mask), mask
