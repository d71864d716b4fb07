from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .config import ModelConfig
from .dit import GROUPS, Conditions, PortraitDiT, build_model, parameter_groups
from .identity import (
    FaceCrop,
    IdentityProjection,
    TextStub,
    VisionEncoderStub,
    detect_faces,
    face_extract,
    vision_encode,
    vision_encode_heads,
)
from .vae import CausalEncoder3D, LandmarkGuider, VAEStub

__all__ = [
    "GROUPS",
    "CausalEncoder3D",
    "Conditions",
    "FaceCrop",
    "IdentityProjection",
    "LandmarkGuider",
    "ModelConfig",
    "PortraitDiT",
    "TextStub",
    "VAEStub",
    "VisionEncoderStub",
    "build_model",
    "detect_faces",
    "face_extract",
    "load_checkpoint",
    "parameter_groups",
    "read_manifest",
    "save_checkpoint",
    "vision_encode",
    "vision_encode_heads",
]
