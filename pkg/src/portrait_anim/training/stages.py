"""Stage descriptions and parameter freezing."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import torch.nn as nn

from ..errors import ConfigError
from ..model.dit import GROUPS, parameter_groups

STAGE_GROUPS = {
    1: ("patch_embed_conv",),
    2: ("identity_projection",),
    3: ("landmark_guider", "dit_blocks", "identity_projection"),
}
DEFAULT_STEPS = {1: 200, 2: 200, 3: 100}
DEFAULT_LR = {1: 1e-5, 2: 1e-5, 3: 1e-6}
FULL_SCALE_BATCH_SIZE = 512


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    trainable_groups: tuple[str, ...]
    steps: int
    learning_rate: float
    batch_size: int = 4
    seed: int = 0
    weight_decay: float = 0.01
    cond_dropout: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    @classmethod
    def default(cls, stage_id: int, **overrides) -> "StageConfig":
        if stage_id not in STAGE_GROUPS:
            raise ConfigError(f"stage_id must be 1, 2 or 3, got {stage_id!r}")
        base = cls(stage_id, STAGE_GROUPS[stage_id], DEFAULT_STEPS[stage_id], DEFAULT_LR[stage_id])
        return replace(base, **overrides).validate()

    def validate(self) -> "StageConfig":
        if self.stage_id not in STAGE_GROUPS:
            raise ConfigError(f"stage_id must be 1, 2 or 3, got {self.stage_id!r}")
        unknown = sorted(set(self.trainable_groups) - set(GROUPS))
        if unknown:
            raise ConfigError(f"unknown parameter groups {unknown}; registry has {list(GROUPS)}")
        if set(self.trainable_groups) != set(STAGE_GROUPS[self.stage_id]):
            raise ConfigError(
                f"stage {self.stage_id} trains {sorted(STAGE_GROUPS[self.stage_id])}, got {sorted(self.trainable_groups)}"
            )
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.cond_dropout < 1.0 or self.weight_decay < 0:
            raise ConfigError("cond_dropout must be in [0, 1) and weight_decay >= 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_groups"] = list(self.trainable_groups)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown stage keys {sorted(unknown)}")
        stage_id = d.pop("stage_id")
        if "trainable_groups" in d:
            d["trainable_groups"] = tuple(d["trainable_groups"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls.default(stage_id, **d)


def default_stages(**overrides) -> list[StageConfig]:
    return [StageConfig.default(i, **overrides) for i in (1, 2, 3)]


def select_groups(model: nn.Module, groups) -> dict[str, nn.Parameter]:
    """Freeze everything, then unfreeze ``groups``; return the trainable tensors by full name."""
    registry = parameter_groups(model)
    unknown = sorted(set(groups) - set(registry))
    if unknown:
        raise ConfigError(f"unknown parameter groups {unknown}; registry has {list(registry)}")
    trainable = {}
    for group, params in registry.items():
        on = group in groups
        for rest, p in params.items():
            p.requires_grad_(on)
            if on:
                trainable[f"{group}.{rest}"] = p
    return trainable


def apply_stage_freeze(model: nn.Module, stage: StageConfig) -> dict[str, nn.Parameter]:
    return select_groups(model, stage.trainable_groups)
