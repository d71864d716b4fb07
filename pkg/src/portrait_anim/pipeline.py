"""Resumable end-to-end orchestration: data, stub pretraining, three stages, evaluation."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import RunConfig
from .datapipe import corpus
from .datapipe.croppad import crop_pad
from .datapipe.frames_io import load_frames
from .datapipe.synth import synth_clip
from .diffusion import make_schedule
from .evalsuite import evaluate_run
from .flowmask import clip_weight_masks, write_weight_pgm
from .inference import vision_encoder_for
from .model.checkpoint import load_checkpoint, load_model, save_checkpoint
from .model.dit import build_model
from .training.data import manifest_examples
from .training.pretrain import pretrain_backbone, pretrain_vae
from .training.trainer import LossLog, run_stage, stage_checkpoint

log = logging.getLogger(__name__)

HELDOUT_SEED_OFFSET = 10_000
HELDOUT_CLIPS = 2


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"phase {phase!r} failed: {type(cause).__name__}: {cause}")
        self.phase = phase
        self.cause = cause


def configure_determinism() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# Flow masks for a stored clip
# ---------------------------------------------------------------------------

def clip_flowmasks(frames: np.ndarray, out_dir, flow_to_intensity: float = 25.5, pgm: bool = True) -> dict:
    """Weight masks for every frame plus a per-frame summary; frame 0 is the all-1.0 convention entry."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    masks, bundles = clip_weight_masks(frames, flow_to_intensity)
    if masks.min() < 1.0 or masks.max() > 1.5:
        raise ValueError(f"weight masks left [1.0, 1.5]: [{masks.min()}, {masks.max()}]")
    entries = []
    for i, (mask, bundle) in enumerate(zip(masks, bundles)):
        if pgm:
            write_weight_pgm(out_dir / f"weight_{i:05d}.pgm", mask)
        if bundle is None:
            entries.append({"frame": 0, "pair": None, "tau": 0.0, "S": 0, "f_fg": 0.0, "convention": "uniform"})
        else:
            entries.append({"frame": i, "pair": [i - 1, i], "tau": float(bundle.tau),
                            "S": int(bundle.foreground_count), "f_fg": float(bundle.foreground_mean)})
    summary = {"v": 1, "n_frames": int(masks.shape[0]), "flow_to_intensity": flow_to_intensity,
               "weight_min": float(masks.min()), "weight_max": float(masks.max()), "frames": entries}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    np.save(out_dir / "weight_masks.npy", masks, allow_pickle=False)
    return summary


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Phase:
    name: str
    sections: tuple[str, ...]  # config sections whose change invalidates this phase
    run: Callable[["Runner"], dict]
    description: str


class Runner:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg.validate()
        self.data_root = cfg.paths.resolve("data_root")
        self.ckpt_dir = cfg.paths.resolve("checkpoint_dir")
        self.report_dir = cfg.paths.resolve("report_dir")
        self.state_dir = self.ckpt_dir / "state"

    # completion markers ---------------------------------------------------
    def marker(self, phase: Phase) -> Path:
        return self.state_dir / f"{phase.name}.json"

    def is_done(self, phase: Phase) -> bool:
        m = self.marker(phase)
        if not m.exists():
            return False
        try:
            return json.loads(m.read_text()).get("fingerprint") == self.cfg.fingerprint(*phase.sections)
        except (OSError, ValueError):
            return False

    def mark_done(self, phase: Phase, outputs: dict) -> None:
        self.state_dir.mkdir(parents=True, exist_ok=True)
        body = {"phase": phase.name, "fingerprint": self.cfg.fingerprint(*phase.sections), "outputs": outputs}
        fd, tmp = tempfile.mkstemp(dir=self.state_dir, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            fh.write(json.dumps(body, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, self.marker(phase))

    # helpers ---------------------------------------------------------------
    def kept(self):
        clips = corpus.kept_clips(self.data_root)
        if not clips:
            raise RuntimeError("no kept clips in the corpus")
        return clips

    def examples(self, model):
        out = []
        for e in self.kept():
            out += manifest_examples(model, self.data_root, e, self.cfg.data.prompt, self.cfg.data.flow_to_intensity)
        return out

    def checkpoint_hash(self) -> str:
        return self.cfg.model.config_hash()


def _synth(r: Runner) -> dict:
    d = r.cfg.data
    entries = corpus.synth_corpus(r.data_root, d.count, r.cfg.seed, d.n_frames, d.width, d.height, d.profiles)
    return {"clips": len(entries)}


def _filter(r: Runner) -> dict:
    entries = corpus.filter_corpus(r.data_root, r.cfg.filter)
    return {"verdicts": {e.clip_id: str(e.filter_verdict) for e in entries}}


def _croppad(r: Runner) -> dict:
    m = r.cfg.model
    corpus.croppad_corpus(r.data_root, m.pixel_width, m.pixel_height)
    return {"size": [m.pixel_width, m.pixel_height]}


def _reference(r: Runner) -> dict:
    encoder = vision_encoder_for(build_model(r.cfg.model, r.cfg.seed))
    entries = corpus.reference_corpus(r.data_root, encoder, r.cfg.seed)
    return {"references": {e.clip_id: e.reference_frame for e in entries if e.filter_verdict.is_kept}}


def _flowmask(r: Runner) -> dict:
    for e in r.kept():
        frames, _ = load_frames(r.data_root / e.frames_path)
        clip_flowmasks(frames, r.data_root / Path(e.frames_path).parent, r.cfg.data.flow_to_intensity, pgm=False)
    return {"clips": len(r.kept())}


def _heldout_frames(r: Runner) -> list[np.ndarray]:
    d, m = r.cfg.data, r.cfg.model
    out = []
    for i in range(HELDOUT_CLIPS):
        c = synth_clip(corpus.clip_seed(r.cfg.seed, HELDOUT_SEED_OFFSET + i), d.n_frames, "talking", d.width, d.height)
        out.append(crop_pad(c.frames, c.face_boxes, m.pixel_width, m.pixel_height))
    return out


def _pretrain(r: Runner) -> dict:
    cfg, p = r.cfg, r.cfg.pretrain
    model = build_model(cfg.model, cfg.seed)
    frames = [load_frames(r.data_root / e.frames_path)[0] for e in r.kept()]
    vae = pretrain_vae(model, frames, p.vae_steps, p.vae_lr, p.batch_size, cfg.seed, _heldout_frames(r))
    losses = pretrain_backbone(model, r.examples(model), make_schedule(cfg.diffusion), p.backbone_steps,
                               p.backbone_lr, p.batch_size, cfg.seed)
    tail = float(np.mean(losses[-20:])) if losses else float("nan")
    path = save_checkpoint(r.ckpt_dir / "pretrain.ckpt", model, config_hash=r.checkpoint_hash(), stage=0,
                           step=p.vae_steps + p.backbone_steps, extra={"vae": vae, "backbone_tail_loss": tail})
    return {"checkpoint": path.name, "vae": vae, "backbone_tail_loss": tail}


def previous_checkpoint(r: Runner, stage_id: int) -> Path:
    ids = [s.stage_id for s in r.cfg.stages]
    earlier = [i for i in ids if i < stage_id]
    return stage_checkpoint(r.ckpt_dir, earlier[-1]) if earlier else r.ckpt_dir / "pretrain.ckpt"


def train_stage(r: Runner, stage_id: int, resume=None) -> dict:
    stage = next(s for s in r.cfg.stages if s.stage_id == stage_id)
    model = build_model(r.cfg.model, r.cfg.seed)
    start = Path(resume) if resume is not None else previous_checkpoint(r, stage_id)
    load_checkpoint(start, model, config_hash=r.checkpoint_hash())
    state = run_stage(model, r.examples(model), stage, make_schedule(r.cfg.diffusion), r.cfg.diffusion.loss_weight,
                      LossLog(r.ckpt_dir / "train_log.csv"), dump_dir=r.ckpt_dir)
    path = save_checkpoint(stage_checkpoint(r.ckpt_dir, stage_id), model, config_hash=r.checkpoint_hash(),
                           stage=stage_id, step=state.step,
                           extra={"mean_loss": state.running_mean, "first_loss": state.losses[0] if state.losses
                                  else None, "stage_config": stage.to_dict(), "resumed_from": start.name})
    return {"checkpoint": path.name, "mean_loss": state.running_mean}


def final_checkpoint(r: Runner) -> Path:
    return stage_checkpoint(r.ckpt_dir, r.cfg.stages[-1].stage_id) if r.cfg.stages else r.ckpt_dir / "pretrain.ckpt"


def _eval(r: Runner) -> dict:
    model, _ = load_model(final_checkpoint(r), r.cfg.seed)
    e = r.cfg.eval
    report = evaluate_run(model, r.kept(), r.data_root, e.seeds, e.pairs, r.cfg.diffusion, e.generator,
                          prompt=r.cfg.data.prompt, sample_dir=r.report_dir / "samples")
    js, txt = report.save(r.report_dir)
    return {"report": js.name, "n_samples": report.n_samples, "n_failed": report.n_failed}


_DATA = ("seed", "data")
PHASES_BEFORE_TRAINING = (
    Phase("synth", _DATA, _synth, "render synthetic clips and start the manifest"),
    Phase("filter", _DATA + ("filter",), _filter, "single-character, motion and length filtering"),
    Phase("croppad", _DATA + ("filter", "model"), _croppad, "crop/pad kept clips to the model frame size"),
    Phase("reference", _DATA + ("filter", "model"), _reference, "pick reference frames, embed faces"),
    Phase("flowmask", _DATA + ("filter", "model"), _flowmask, "flow-derived loss weight masks"),
    Phase("pretrain", _DATA + ("filter", "model", "diffusion", "pretrain"), _pretrain,
          "fit the autoencoder stub and the base denoiser"),
)


def build_phases(cfg: RunConfig) -> list[Phase]:
    phases = list(PHASES_BEFORE_TRAINING)
    upstream = _DATA + ("filter", "model", "diffusion", "pretrain", "stages")
    for s in cfg.stages:
        phases.append(Phase(f"stage{s.stage_id}", upstream, (lambda r, k=s.stage_id: train_stage(r, k)),
                            f"stage {s.stage_id}: train {', '.join(s.trainable_groups)} for {s.steps} steps "
                            f"at lr {s.learning_rate:g}"))
    phases.append(Phase("eval", upstream + ("eval",), _eval, "cross-identity evaluation and metric report"))
    return phases


def plan(cfg: RunConfig) -> list[dict]:
    r = Runner(cfg)
    return [{"phase": p.name, "done": r.is_done(p), "description": p.description} for p in build_phases(cfg)]


def run(cfg: RunConfig, only: list[str] | None = None, force: bool = False) -> dict:
    """Run (or skip, when already complete) every phase in order."""
    configure_determinism()
    r = Runner(cfg)
    results = {}
    for phase in build_phases(cfg):
        if only is not None and phase.name not in only:
            continue
        if r.is_done(phase) and not force:
            log.info("phase %s: up to date", phase.name)
            results[phase.name] = "skipped"
            continue
        log.info("phase %s: running", phase.name)
        try:
            outputs = phase.run(r)
        except Exception as exc:
            raise PhaseError(phase.name, exc) from exc
        r.mark_done(phase, outputs)
        results[phase.name] = "ran"
    return results
