from .data import DEFAULT_PROMPT, Batch, Example, clip_examples, decode_latents, encode_frames, manifest_examples
from .optim import AdamW
from .pretrain import pretrain_backbone, pretrain_vae, reconstruction_mse
from .stages import (
    DEFAULT_LR,
    DEFAULT_STEPS,
    FULL_SCALE_BATCH_SIZE,
    STAGE_GROUPS,
    StageConfig,
    apply_stage_freeze,
    default_stages,
    select_groups,
)
from .trainer import LossLog, TrainState, compute_loss, run_pipeline, run_stage, stage_checkpoint, train_step

__all__ = [
    "DEFAULT_LR",
    "DEFAULT_PROMPT",
    "DEFAULT_STEPS",
    "FULL_SCALE_BATCH_SIZE",
    "STAGE_GROUPS",
    "AdamW",
    "Batch",
    "Example",
    "LossLog",
    "StageConfig",
    "TrainState",
    "apply_stage_freeze",
    "clip_examples",
    "compute_loss",
    "decode_latents",
    "default_stages",
    "encode_frames",
    "manifest_examples",
    "pretrain_backbone",
    "pretrain_vae",
    "reconstruction_mse",
    "run_pipeline",
    "run_stage",
    "select_groups",
    "stage_checkpoint",
    "train_step",
]
