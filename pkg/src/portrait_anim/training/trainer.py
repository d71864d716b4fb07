"""Staged training of the denoiser with the flow-weighted noise objective."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..diffusion import DiffusionConfig, NoiseSchedule, add_noise
from ..errors import ConfigError, TrainingDivergedError
from ..flowmask import face_aware_loss
from ..model.checkpoint import load_checkpoint, save_checkpoint
from ..model.dit import PortraitDiT
from .data import Batch, Example, sample_batch
from .optim import AdamW
from .stages import StageConfig, apply_stage_freeze

log = logging.getLogger(__name__)

LOG_FIELDS = ("stage", "step", "loss", "lr", "wall_ms")


def stage_seed(seed: int, stage_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(stage_id)]).generate_state(1)[0])


@dataclass
class TrainState:
    stage_id: int
    optimizer: AdamW
    generator: torch.Generator
    step: int = 0
    losses: list[float] = field(default_factory=list)

    @classmethod
    def start(cls, model: PortraitDiT, stage: StageConfig) -> "TrainState":
        stage.validate()
        trainable = apply_stage_freeze(model, stage)
        opt = AdamW(trainable, stage.learning_rate, stage.betas, stage.adam_eps, stage.weight_decay)
        gen = torch.Generator().manual_seed(stage_seed(stage.seed, stage.stage_id))
        return cls(stage.stage_id, opt, gen)

    @property
    def running_mean(self) -> float:
        return float(np.mean(self.losses)) if self.losses else math.nan

    def rng_state(self) -> torch.Tensor:
        return self.generator.get_state()


@dataclass
class LossTerms:
    t: torch.Tensor
    eps: torch.Tensor
    pred: torch.Tensor
    drop: torch.Tensor


def compute_loss(model: PortraitDiT, batch: Batch, sched: NoiseSchedule, gen: torch.Generator,
                 cond_dropout: float, loss_weight: float = 1.0, drop_all: bool = False
                 ) -> tuple[torch.Tensor, LossTerms]:
    """Noise the batch at uniform t, predict the noise and weight the error by the flow masks.

    Random draws happen in a fixed order (t, eps, dropout) from ``gen``.
    """
    x0 = batch.latents
    b = x0.shape[0]
    t = torch.randint(0, sched.T, (b,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    drop = torch.rand(b, generator=gen) < cond_dropout
    if drop_all:
        drop = torch.ones(b, dtype=torch.bool)
    x_t = add_noise(x0, t, eps, sched)
    pred = model(x_t, t, batch.conditions(drop))
    loss = loss_weight * face_aware_loss(eps, pred, batch.weight_masks)
    return loss, LossTerms(t, eps, pred, drop)


def _check_finite(loss: torch.Tensor, step: int, terms: LossTerms, batch: Batch, dump_dir) -> None:
    if torch.isfinite(loss):
        return
    diag = {"step": step, "t": terms.t.tolist(), "batch": batch.clip_ids, "loss": float(loss.detach())}
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
        (Path(dump_dir) / f"diverged_step{step}.json").write_text(json.dumps(diag, indent=1))
    raise TrainingDivergedError(f"non-finite loss at step {step}", diag)


def train_step(model: PortraitDiT, batch: Batch, state: TrainState, stage: StageConfig, sched: NoiseSchedule,
               loss_weight: float = 1.0, dump_dir=None) -> tuple[TrainState, float]:
    """One optimisation step on ``batch``; updates ``state`` in place and returns it with the loss."""
    state.optimizer.zero_grad()
    loss, terms = compute_loss(model, batch, sched, state.generator, stage.cond_dropout, loss_weight)
    _check_finite(loss, state.step, terms, batch, dump_dir)
    loss.backward()
    state.optimizer.step()
    state.optimizer.zero_grad()
    state.step += 1
    value = float(loss.detach())
    state.losses.append(value)
    return state, value


class LossLog:
    """Append-only CSV with one row per optimisation step."""

    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists():
                with open(self.path, "w", newline="") as fh:
                    csv.writer(fh).writerow(LOG_FIELDS)

    def write(self, stage: int, step: int, loss: float, lr: float, wall_ms: float) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([stage, step, repr(loss), repr(lr), f"{wall_ms:.3f}"])


def run_stage(model: PortraitDiT, examples: list[Example], stage: StageConfig, sched: NoiseSchedule,
              loss_weight: float = 1.0, loss_log: LossLog | None = None, dump_dir=None) -> TrainState:
    if not examples:
        raise ConfigError("no training examples")
    model.train()
    state = TrainState.start(model, stage)
    for _ in range(stage.steps):
        t0 = time.perf_counter()
        batch = sample_batch(examples, stage.batch_size, state.generator)
        _, loss = train_step(model, batch, state, stage, sched, loss_weight, dump_dir)
        if loss_log is not None:
            loss_log.write(stage.stage_id, state.step, loss, stage.learning_rate, (time.perf_counter() - t0) * 1e3)
    log.info("stage %d: %d steps, mean loss %.5f", stage.stage_id, stage.steps, state.running_mean)
    model.eval()
    return state


def stage_checkpoint(ckpt_dir, stage_id: int) -> Path:
    return Path(ckpt_dir) / f"stage{stage_id}.ckpt"


def run_pipeline(model: PortraitDiT, stages: list[StageConfig], examples: list[Example], sched: NoiseSchedule,
                 diff_cfg: DiffusionConfig, ckpt_dir, log_path=None, resume=None) -> Path:
    """Run stages in order, checkpointing after each.

    ``resume`` is a checkpoint; stages up to and including its recorded
    stage are skipped. A failed checkpoint write raises before the next
    stage starts.
    """
    ids = [s.stage_id for s in stages]
    if ids != sorted(ids) or len(set(ids)) != len(ids):
        raise ConfigError(f"stages must be in increasing order, got {ids}")
    cfg_hash = model.cfg.config_hash()
    done = 0
    last = None
    if resume is not None:
        manifest = load_checkpoint(resume, model, config_hash=cfg_hash)
        done, last = int(manifest["stage"]), Path(resume)
    loss_log = LossLog(log_path)
    for stage in stages:
        if stage.stage_id <= done:
            continue
        state = run_stage(model, examples, stage, sched, diff_cfg.loss_weight, loss_log, dump_dir=ckpt_dir)
        last = save_checkpoint(stage_checkpoint(ckpt_dir, stage.stage_id), model, config_hash=cfg_hash,
                               stage=stage.stage_id, step=state.step,
                               extra={"mean_loss": state.running_mean, "stage_config": stage.to_dict()})
    if last is None:
        raise ConfigError("no stage was run and no checkpoint was given")
    return last
