"""Command-line entry point: ``portrait-anim <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import pipeline
from .config import HOME_ENV, RunConfig
from .datapipe import corpus
from .datapipe.filtering import FilterThresholds
from .datapipe.frames_io import load_frames, save_frames
from .datapipe.manifest import read_manifests
from .diffusion import DiffusionConfig
from .evalsuite import evaluate_run
from .landmarks import LandmarkSequence

log = logging.getLogger("portrait_anim")


class CommandError(RuntimeError):
    """Failure attributed to a named step of a command."""

    def __init__(self, step: str, cause: BaseException):
        super().__init__(f"{step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause


def _step(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise CommandError(name, exc) from exc


def load_config(args) -> RunConfig:
    """Config file (or the tiny preset), then flag overrides."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig.tiny()
    if getattr(args, "home", None):
        cfg = replace(cfg, paths=replace(cfg.paths, home=args.home))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg.validate()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_data(args) -> int:
    cfg = load_config(args)
    root = cfg.paths.resolve("data_root")
    if args.data_cmd == "synth":
        d = cfg.data
        count = args.count if args.count is not None else d.count
        entries = corpus.synth_corpus(root, count, cfg.seed, args.frames or d.n_frames, d.width, d.height,
                                      d.profiles)
        print(json.dumps({"clips": len(entries), "manifest": str(corpus.manifest_path(root))}))
    elif args.data_cmd == "filter":
        thresholds = cfg.filter
        if args.thresholds:
            thresholds = FilterThresholds.from_dict(yaml.safe_load(Path(args.thresholds).read_text()) or {})
        entries = corpus.filter_corpus(root, thresholds)
        print(json.dumps({e.clip_id: str(e.filter_verdict) for e in entries}, indent=1))
    elif args.data_cmd == "croppad":
        w = args.w or cfg.model.pixel_width
        h = args.h or cfg.model.pixel_height
        entries = corpus.croppad_corpus(root, w, h)
        print(json.dumps({"cropped": sum(e.filter_verdict.is_kept for e in entries), "size": [w, h]}))
    elif args.data_cmd == "reference":
        from .inference import vision_encoder_for
        from .model.dit import build_model

        entries = corpus.reference_corpus(root, vision_encoder_for(build_model(cfg.model, cfg.seed)), cfg.seed)
        print(json.dumps({e.clip_id: e.reference_frame for e in entries if e.filter_verdict.is_kept}))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    pipeline.configure_determinism()
    wanted = [s.stage_id for s in cfg.stages] if args.stage == "all" else [int(args.stage)]
    missing = [k for k in wanted if k not in [s.stage_id for s in cfg.stages]]
    if missing:
        raise CommandError("train", ValueError(f"stage(s) {missing} not in the config"))
    if args.resume is None:
        # Prepare whatever upstream phases are missing (no-ops when complete).
        pipeline.run(cfg, only=[p.name for p in pipeline.PHASES_BEFORE_TRAINING])
    elif not Path(args.resume).exists():
        raise CommandError("train", FileNotFoundError(f"resume checkpoint {args.resume} not found"))
    r = pipeline.Runner(cfg)
    resume = args.resume
    out = {}
    for k in wanted:
        out[f"stage{k}"] = _step(f"stage{k}", pipeline.train_stage, r, k, resume)
        resume = None
    print(json.dumps(out, indent=1))
    return 0


def _read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def cmd_animate(args) -> int:
    from .inference import animate
    from .model.checkpoint import load_model

    pipeline.configure_determinism()
    if not Path(args.ckpt).exists():
        raise CommandError("load checkpoint", FileNotFoundError(f"checkpoint {args.ckpt} not found"))
    model, _ = _step("load checkpoint", load_model, args.ckpt)
    reference = _step("read reference", _read_image, args.reference)
    driving = _step("read driving landmarks", LandmarkSequence.load, args.driving)
    diffusion = RunConfig.load(args.config).diffusion if args.config else DiffusionConfig()
    anim = _step("animate", animate, model, reference, driving, diffusion=diffusion, seed=args.seed,
                 steps=args.steps, cfg_scale=args.cfg_scale, prompt=args.prompt)
    _step("write output", save_frames, args.out, anim.frames, driving.fps)
    print(json.dumps({"frames": int(anim.frames.shape[0]), "out": str(args.out), "face_box": list(anim.face.box)}))
    return 0


def cmd_flowmask(args) -> int:
    frames, _ = _step("read clip", load_frames, args.clip)
    summary = _step("flow masks", pipeline.clip_flowmasks, frames, args.out, args.flow_to_intensity)
    print(json.dumps({"frames": summary["n_frames"], "weight_min": summary["weight_min"],
                      "weight_max": summary["weight_max"], "out": str(args.out)}))
    return 0


def cmd_eval(args) -> int:
    from .model.checkpoint import load_model

    pipeline.configure_determinism()
    cfg = load_config(args)
    if not Path(args.ckpt).exists():
        raise CommandError("load checkpoint", FileNotFoundError(f"checkpoint {args.ckpt} not found"))
    model, _ = _step("load checkpoint", load_model, args.ckpt)
    manifest = Path(args.manifests) if args.manifests else corpus.manifest_path(cfg.paths.resolve("data_root"))
    entries = list(_step("read manifests", read_manifests, manifest).values())
    seeds = [args.seed] if args.seed is not None else list(cfg.eval.seeds)
    report = _step("evaluate", evaluate_run, model, entries, manifest.parent, seeds,
                   args.pairs if args.pairs is not None else cfg.eval.pairs, cfg.diffusion, args.generator,
                   prompt=cfg.data.prompt)
    out = Path(args.out) if args.out else cfg.paths.resolve("report_dir")
    report.save(out)
    sys.stdout.write(report.to_table())
    return 0


def cmd_pipeline(args) -> int:
    cfg = load_config(args)
    if args.dry_run:
        for item in pipeline.plan(cfg):
            state = "done" if item["done"] else "todo"
            print(f"{item['phase']:<10} {state:<5} {item['description']}")
        return 0
    results = pipeline.run(cfg)
    print(json.dumps(results, indent=1))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, seed=True) -> None:
    p.add_argument("--config", help="YAML run config (default: built-in tiny preset)")
    p.add_argument("--home", help=f"root for relative paths (default: ${HOME_ENV} or ~/.ska1)")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portrait-anim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="synthesise and curate clips")
    dsub = data.add_subparsers(dest="data_cmd", required=True)
    p = dsub.add_parser("synth", help="render synthetic clips and start a manifest")
    _common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p = dsub.add_parser("filter", help="apply face-count, motion and length filters")
    _common(p)
    p.add_argument("--thresholds", help="YAML/JSON file of filter thresholds")
    p = dsub.add_parser("croppad", help="crop/pad kept clips to a fixed size")
    _common(p)
    p.add_argument("--w", type=int, default=None, help="target width (default: model frame width)")
    p.add_argument("--h", type=int, default=None, help="target height (default: model frame height)")
    p = dsub.add_parser("reference", help="pick reference frames and store identity embeddings")
    _common(p)
    data.set_defaults(func=cmd_data)

    p = sub.add_parser("train", help="run training stages")
    _common(p)
    p.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    p.add_argument("--resume", help="start from this checkpoint instead of the previous stage's")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("animate", help="animate a reference image with driving landmarks")
    p.add_argument("--reference", required=True, help="reference image (PPM/PNG)")
    p.add_argument("--driving", required=True, help="driving landmark JSON")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output frame directory")
    p.add_argument("--config", help="YAML run config supplying sampler defaults")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prompt", default="a person is talking")
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("flowmask", help="write flow weight masks and a summary for a stored clip")
    p.add_argument("--clip", required=True, help="frame directory with index.json")
    p.add_argument("--out", required=True)
    p.add_argument("--flow-to-intensity", type=float, default=25.5)
    p.set_defaults(func=cmd_flowmask)

    p = sub.add_parser("eval", help="evaluate a checkpoint on cross-identity pairs")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifests", help="manifest.jsonl (default: the data root's)")
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--generator", choices=["model", "oracle"], default="model")
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run every phase end to end (resumable)")
    _common(p)
    p.add_argument("--dry-run", action="store_true", help="print the phase plan and exit")
    p.set_defaults(func=cmd_pipeline)
    return parser


def _error_json(args, exc: BaseException) -> dict:
    step = getattr(exc, "phase", None) or getattr(exc, "step", None)
    cause = getattr(exc, "cause", exc)
    return {"error": {"command": getattr(args, "command", None), "step": step, "type": type(cause).__name__,
                      "message": str(cause)}}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:
        sys.stderr.write(json.dumps(_error_json(args, exc)) + "\n")
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
