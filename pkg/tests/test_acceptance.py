"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they
are also repeated in the terminal summary.
"""

import time

import numpy as np
import torch

from conftest import periodic_texture, tiny_examples
from portrait_anim.datapipe.corpus import croppad_corpus, filter_corpus, manifest_path, reference_corpus, synth_corpus
from portrait_anim.datapipe.croppad import FULL_SCALE_TARGET, crop_offsets, crop_pad
from portrait_anim.datapipe.filtering import FilterThresholds, filter_clip
from portrait_anim.datapipe.manifest import ClipManifest
from portrait_anim.datapipe.synth import synth_clip
from portrait_anim.diffusion import DiffusionConfig, add_noise, cfg_combine, ddim_sample, make_schedule, noise_loss
from portrait_anim.evalsuite import frechet_distance
from portrait_anim.flowmask import (
    FlowField,
    binary_mask,
    estimate_flow,
    face_aware_loss,
    flow_threshold,
    foreground_mean,
    normalized_mask,
    resize_mask_to_latent,
)
from portrait_anim.inference import animate, vision_encoder_for
from portrait_anim.landmarks import Placement
from portrait_anim.model import ModelConfig, VisionEncoderStub, build_model, face_extract, load_checkpoint, vision_encode
from portrait_anim.model.checkpoint import save_checkpoint
from portrait_anim.training import (
    Batch,
    StageConfig,
    TrainState,
    clip_examples,
    compute_loss,
    pretrain_vae,
    run_pipeline,
    train_step,
)
from portrait_anim.training.data import sample_batch
from portrait_anim.training.stages import STAGE_GROUPS

SCHED = make_schedule(DiffusionConfig())


def finish(record, label, ok, detail):
    record(label, bool(ok), detail)
    assert ok, f"{label}: {detail}"


# AC1 ---------------------------------------------------------------------------------------------

def test_ac1_face_aware_loss_formulas(acceptance_line):
    t0 = time.perf_counter()
    checks = []
    mag, tau = flow_threshold(FlowField.zeros(2, 2))
    checks.append(tau == 0.0 and not mag.any())
    mag, tau = flow_threshold(FlowField(np.full((2, 2), 3.0), np.full((2, 2), 4.0)))
    checks.append(tau == 5.0 and np.all(mag == 5.0))
    mag, tau = flow_threshold(FlowField(np.array([[1.0], [0.0]]), np.zeros((2, 1))))
    checks.append(tau == 0.5 and mag.ravel().tolist() == [1.0, 0.0])
    checks.append(not binary_mask(np.full((3, 3), 2.0), 2.0).any())
    checks.append(binary_mask(np.array([1.0, 3, 5, 7]), 4.0).tolist() == [0, 0, 1, 1])
    checks.append(not binary_mask(np.zeros(4), 0.0).any())
    f, _ = foreground_mean(np.array([1.0, 3, 5, 7]), np.array([0, 0, 1, 1]))
    checks.append(f == 6.0)
    checks.append(foreground_mean(np.array([1.0, 3, 5, 7]), np.zeros(4))[0] == 0.0)
    checks.append(foreground_mean(np.array([1.0, 3, 5, 7]), np.ones(4))[0] == 4.0)
    checks.append(normalized_mask(np.array([0.0, 255.0, 204.0])).tolist() == [1.0, 1.5, 1.3])
    checks.append(np.all(resize_mask_to_latent(np.full((4, 6), 1.25), 2, 3) == 1.25))
    checks.append(resize_mask_to_latent(np.array([[1.0, 1.0], [1.5, 1.5]]), 1, 1).item() == 1.25)
    m = np.random.default_rng(0).uniform(1, 1.5, (3, 5))
    checks.append(resize_mask_to_latent(m, 3, 5).tobytes() == m.tobytes())
    e = torch.randn(2, 3, 3)
    checks.append(face_aware_loss(e, e, torch.full((2, 3, 3), 1.2)).item() == 0.0)
    p = torch.randn(2, 3, 3)
    checks.append(face_aware_loss(e, p, torch.ones(2, 3, 3)).item() == ((e.double() - p.double()) ** 2).mean().item())
    checks.append(face_aware_loss(torch.zeros(1, 2, 1), torch.tensor([[[1.0], [2.0]]]),
                                  torch.tensor([[[1.0], [1.5]]])).item() == 3.5)
    examples_ok = all(checks)

    rng = np.random.default_rng(1)
    bound_ok = True
    for _ in range(500):
        shape = tuple(rng.integers(1, 6, 3))
        a, b, w = rng.normal(size=shape), rng.normal(size=shape), rng.uniform(1.0, 1.5, shape)
        mse = np.mean((a - b) ** 2)
        loss = face_aware_loss(a, b, w).item()
        bound_ok &= mse * (1 - 1e-12) <= loss <= 1.5 * mse * (1 + 1e-12)

    true = torch.as_tensor(rng.normal(size=(4, 4, 4)))
    pred = torch.as_tensor(rng.normal(size=(4, 4, 4))).requires_grad_(True)
    w = torch.as_tensor(rng.uniform(1.0, 1.5, (4, 4, 4)))
    face_aware_loss(true, pred, w).backward()
    num = torch.zeros_like(pred)
    h = 1e-6
    base = pred.detach()
    for idx in np.ndindex(4, 4, 4):
        up, dn = base.clone(), base.clone()
        up[idx] += h
        dn[idx] -= h
        num[idx] = (face_aware_loss(true, up, w) - face_aware_loss(true, dn, w)) / (2 * h)
    rel = float((pred.grad - num).norm() / num.norm())
    elapsed = time.perf_counter() - t0
    ok = examples_ok and bound_ok and rel < 1e-4 and elapsed < 10
    finish(acceptance_line, "AC1", ok, f"examples={examples_ok} bounds(500)={bool(bound_ok)} "
                                       f"grad_rel_err={rel:.2e} (<1e-4) time={elapsed:.2f}s (<10s)")


# AC2 ---------------------------------------------------------------------------------------------

def test_ac2_flow_oracle(acceptance_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for case in range(20):
        dx, dy = (int(v) for v in rng.integers(-4, 5, 2))
        img = periodic_texture(np.random.default_rng(case), 64)
        flow = estimate_flow(img, np.roll(img, (dy, dx), axis=(0, 1)))
        epe = float(np.mean(np.hypot(flow.u - dx, flow.v - dy)))
        worst = max(worst, epe)
    elapsed = time.perf_counter() - t0
    finish(acceptance_line, "AC2", worst < 0.5 and elapsed < 30,
           f"worst mean endpoint error over 20 shifts in [-4,4]^2 = {worst:.4f}px (<0.5) time={elapsed:.1f}s (<30s)")


# AC3 ---------------------------------------------------------------------------------------------

def _tensors(path, cfg):
    m = build_model(cfg, 0)
    load_checkpoint(path, m)
    return {k: v.numpy().tobytes() for k, v in m.state_dict().items()}


def test_ac3_freeze_invariants(tmp_path, acceptance_line):
    t0 = time.perf_counter()
    cfg = ModelConfig.tiny()
    model = build_model(cfg, 0)
    examples = tiny_examples(model, seeds=(0, 1, 2, 3))
    start = save_checkpoint(tmp_path / "start.ckpt", model, config_hash=cfg.config_hash(), stage=0, step=0)
    stages = [StageConfig.default(k, steps=50, learning_rate=1e-3) for k in (1, 2, 3)]
    run_pipeline(model, stages, examples, SCHED, DiffusionConfig(), tmp_path)
    sets_ok = (set(STAGE_GROUPS[1]) == {"patch_embed_conv"} and set(STAGE_GROUPS[2]) == {"identity_projection"}
               and set(STAGE_GROUPS[3]) == {"landmark_guider", "dit_blocks", "identity_projection"})
    details, ok = [], sets_ok
    prev = start
    for s in stages:
        before, after = _tensors(prev, cfg), _tensors(tmp_path / f"stage{s.stage_id}.ckpt", cfg)
        frozen_same = all(after[k] == before[k] for k in before if k.split(".")[0] not in s.trainable_groups)
        moved = {k.split(".")[0] for k in before if after[k] != before[k]}
        ok &= frozen_same and moved == set(s.trainable_groups)
        details.append(f"stage{s.stage_id}: frozen identical={frozen_same} changed={sorted(moved)}")
        prev = tmp_path / f"stage{s.stage_id}.ckpt"
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    finish(acceptance_line, "AC3", ok, f"sets match={sets_ok}; " + "; ".join(details) + f"; time={elapsed:.1f}s (<120s)")


# AC4 ---------------------------------------------------------------------------------------------

def test_ac4_unit_masks_reduce_to_plain_loss(acceptance_line):
    cfg = ModelConfig.tiny()
    model = build_model(cfg, 0)
    examples = tiny_examples(model, seeds=(0, 1, 2, 3))
    stage = StageConfig.default(3, steps=20, learning_rate=1e-3)
    state = TrainState.start(model, stage)
    batch_gen = torch.Generator().manual_seed(4)
    worst = 0.0
    for _ in range(20):
        batch = sample_batch(examples, 4, batch_gen).with_unit_weights()
        probe = torch.Generator()
        probe.set_state(state.generator.get_state())
        with torch.no_grad():
            _, terms = compute_loss(model, batch, SCHED, probe, stage.cond_dropout)
        reference = noise_loss(terms.eps, terms.pred, 1.0).item()
        _, loss = train_step(model, batch, state, stage, SCHED)
        worst = max(worst, abs(loss - reference))
    finish(acceptance_line, "AC4", worst <= 1e-12,
           f"max |train_step loss - plain noise loss| over 20 batches = {worst:.2e} (<=1e-12)")


# AC5 ---------------------------------------------------------------------------------------------

def test_ac5_encoder_causality(acceptance_line):
    cfg = ModelConfig.tiny()
    model = build_model(cfg, 0)
    gen = torch.Generator().manual_seed(5)
    violations, checked = 0, 0
    with torch.no_grad():
        for seed in range(50):
            clip = synth_clip(seed, cfg.pixel_frames, "talking", cfg.pixel_width, cfg.pixel_height)
            video = torch.from_numpy(clip.frames).permute(0, 3, 1, 2)[None]
            lm = tiny_examples_raster(model, clip)
            for enc, x in ((model.vae_stub.encoder, video), (model.landmark_guider, lm)):
                base = enc(x)
                for n in range(cfg.latent_frames - 1):
                    end = enc.last_input_frame(n)
                    edited = x.clone()
                    edited[:, end + 1:] = torch.rand(edited[:, end + 1:].shape, generator=gen)
                    violations += not torch.equal(enc(edited)[:, : n + 1], base[:, : n + 1])
                    checked += 1
    finish(acceptance_line, "AC5", violations == 0,
           f"{checked} future-edit checks on 50 clips x 2 encoders, bitwise violations = {violations}")


def tiny_examples_raster(model, clip):
    from portrait_anim.landmarks import rasterize_sequence

    cfg = model.cfg
    r = rasterize_sequence(clip.landmarks, clip.placements[0], cfg.pixel_width, cfg.pixel_height, cfg.landmark_radius)
    return torch.from_numpy(r)[None, :, None]


# AC6 ---------------------------------------------------------------------------------------------

def _cropped(seed, n_frames, size=32):
    clip = synth_clip(seed, n_frames, "talking", 40, 40)
    boxes = [[b] for b, *_ in clip.face_boxes]
    ox, oy = crop_offsets(40, 40, boxes, size, size)
    frames = crop_pad(clip.frames, boxes, size, size, (ox, oy))
    p = clip.placements[0]
    x0, y0, x1, y1 = clip.face_boxes[0][0]
    return frames, clip.landmarks, Placement(p.cx - ox, p.cy - oy, p.scale), (x0 - ox, y0 - oy, x1 - ox, y1 - oy)


def _probe_loss(model, examples, seed=1234, copies=16):
    batch = Batch.collate([examples[0]] * copies)
    with torch.no_grad():
        loss, _ = compute_loss(model, batch, SCHED, torch.Generator().manual_seed(seed), 0.0)
    return float(loss)


def test_ac6_overfit_single_clip(acceptance_line):
    t0 = time.perf_counter()
    cfg = ModelConfig.tiny()
    model = build_model(cfg, 0)
    pretrain_vae(model, [_cropped(s, 16)[0] for s in range(8)], steps=200)
    frames, seq, placement, box = _cropped(0, cfg.pixel_frames)
    emb = vision_encode(vision_encoder_for(model), face_extract(frames[0], cfg.face_size, box).image)
    examples = clip_examples(model, "overfit", frames, seq, placement, emb)
    stage = StageConfig.default(3, steps=200, learning_rate=3e-3, batch_size=16, weight_decay=0.0, seed=0)
    probe_before = _probe_loss(model, examples)
    state = TrainState.start(model, stage)
    model.train()
    for _ in range(stage.steps):
        train_step(model, Batch.collate([examples[0]] * stage.batch_size), state, stage, SCHED)
    model.eval()
    probe_after = _probe_loss(model, examples)
    probe_ratio = probe_after / probe_before
    raw_ratio = float(np.mean(state.losses[-10:]) / state.losses[0])
    anim = animate(model, frames[0], seq, diffusion=DiffusionConfig(), seed=0, box=box, placement=placement)
    mse = float(np.mean((anim.frames - frames) ** 2))
    elapsed = time.perf_counter() - t0
    ok = probe_ratio < 0.1 and raw_ratio < 0.1 and mse < 0.05
    finish(acceptance_line, "AC6", ok,
           f"loss ratio (fixed probe, final/step-1) = {probe_ratio:.4f}, last-10 running/step-1 = {raw_ratio:.4f} "
           f"(<0.1); DDIM-50 CFG-3 decoded MSE = {mse:.4f} (<0.05); time={elapsed:.0f}s")


# AC7 ---------------------------------------------------------------------------------------------

def test_ac7_sampler_identity(acceptance_line):
    gen = torch.Generator().manual_seed(7)
    worst = 0.0
    for _ in range(10):
        x0 = torch.randn(2, 4, 4, 3, 3, generator=gen, dtype=torch.float64)
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        x_t = add_noise(x0, SCHED.T - 1, eps, SCHED)
        out = ddim_sample(lambda x, t, c: eps, None, SCHED, 1, 0, x0.shape, dtype=torch.float64, x_T=x_t)
        worst = max(worst, float((out - x0).abs().max()))
    u, c = torch.randn(3, 5, generator=gen), torch.randn(3, 5, generator=gen)
    combine_exact = torch.equal(cfg_combine(u, c, 1.0), c)

    def model(x, t, cond):
        return torch.tanh(x * cond + t.view(-1, 1).float() / 1000)

    guided = ddim_sample(model, 1.0, SCHED, 10, 3, (2, 6), cfg_scale=1.0, uncond_conditions=0.0)
    plain = ddim_sample(model, 1.0, SCHED, 10, 3, (2, 6))
    sampler_exact = torch.equal(guided, plain)
    ok = worst < 1e-6 and combine_exact and sampler_exact
    finish(acceptance_line, "AC7", ok, f"one-step inversion max err = {worst:.2e} (<1e-6); CFG s=1 bit-equal: "
                                       f"combine={combine_exact}, sampler={sampler_exact}")


# AC8 ---------------------------------------------------------------------------------------------

def test_ac8_frechet_math(acceptance_line):
    rng = np.random.default_rng(8)
    m = rng.normal(size=(5, 5))
    cov, mu = m @ m.T, rng.normal(size=5)
    e1 = abs(frechet_distance(mu, cov, mu, cov))
    e2 = abs(frechet_distance([0.0], [[1.0]], [3.0], [[1.0]]) - 9.0)
    e3 = abs(frechet_distance([0.0], [[1.0]], [0.0], [[4.0]]) - 1.0)
    worst_self, worst_sym = 0.0, 0.0
    for _ in range(100):
        d = int(rng.integers(1, 9))
        a = rng.normal(size=(d, int(rng.integers(1, d + 1))))
        b = rng.normal(size=(d, int(rng.integers(1, d + 1))))
        c1, c2 = a @ a.T, b @ b.T
        m1, m2 = rng.normal(size=d), rng.normal(size=d)
        worst_self = max(worst_self, frechet_distance(m1, c1, m1, c1))
        worst_sym = max(worst_sym, abs(frechet_distance(m1, c1, m2, c2) - frechet_distance(m2, c2, m1, c1)))
    ok = max(e1, e2, e3) <= 1e-9 and worst_self <= 1e-9 and worst_sym <= 1e-9
    finish(acceptance_line, "AC8", ok, f"closed-form errors = {e1:.1e}, {e2:.1e}, {e3:.1e}; over 100 random PSD pairs "
                                       f"max self-distance = {worst_self:.1e}, max asymmetry = {worst_sym:.1e} (<=1e-9)")


# AC9 ---------------------------------------------------------------------------------------------

def test_ac9_data_pipeline(tmp_path, acceptance_line):
    th = FilterThresholds()

    def verdict(profile):
        clip = synth_clip(9, 16, profile)
        entry = ClipManifest("c", "f", "l", 16, 25, tuple(tuple(f) for f in clip.face_boxes))
        return filter_clip(entry, clip.landmarks, th)

    static_dropped = verdict("static").status == "dropped"
    talking_kept = verdict("talking").is_kept
    rng = np.random.default_rng(9)
    full = crop_pad(np.zeros((1, 100, 160, 3)), [[(70, 30, 90, 60)]])
    dims_ok = full.shape[1:3] == (FULL_SCALE_TARGET[1], FULL_SCALE_TARGET[0])
    for _ in range(100):
        fw, fh, tw, th_ = (int(v) for v in rng.integers(1, 80, 4))
        x0, y0 = int(rng.integers(0, fw)), int(rng.integers(0, fh))
        box = (x0, y0, int(rng.integers(x0 + 1, fw + 1)), int(rng.integers(y0 + 1, fh + 1)))
        dims_ok &= crop_pad(np.zeros((2, fh, fw)), [[box]] * 2, tw, th_).shape == (2, th_, tw)
    enc = VisionEncoderStub(32, 24)
    synth_corpus(tmp_path, 6, seed=9)
    filter_corpus(tmp_path, th)
    croppad_corpus(tmp_path, 32, 32)
    reference_corpus(tmp_path, enc, 0)
    first = manifest_path(tmp_path).read_bytes()
    filter_corpus(tmp_path, th)
    croppad_corpus(tmp_path, 32, 32)
    reference_corpus(tmp_path, enc, 0)
    idempotent = manifest_path(tmp_path).read_bytes() == first
    ok = static_dropped and talking_kept and dims_ok and idempotent
    finish(acceptance_line, "AC9", ok, f"static dropped={static_dropped} talking kept={talking_kept} "
                                       f"crop dims exact (incl. 480x720)={bool(dims_ok)} manifest rerun "
                                       f"idempotent={idempotent}")


# AC10 --------------------------------------------------------------------------------------------

def _files(root, sub, pattern="*"):
    base = root / sub
    return {p.relative_to(base).as_posix(): p.read_bytes() for p in sorted(base.rglob(pattern)) if p.is_file()}


def test_ac10_end_to_end_determinism(pipeline_homes, acceptance_line):
    (a, b), times = pipeline_homes
    ckpt_a, ckpt_b = _files(a, "checkpoints", "*.ckpt"), _files(b, "checkpoints", "*.ckpt")
    samples_a, samples_b = _files(a, "reports/samples"), _files(b, "reports/samples")
    report_a, report_b = (a / "reports" / "metrics.json").read_bytes(), (b / "reports" / "metrics.json").read_bytes()
    same_ckpt = bool(ckpt_a) and ckpt_a == ckpt_b
    same_samples = bool(samples_a) and samples_a == samples_b
    same_report = report_a == report_b
    wall = max(times)
    ok = same_ckpt and same_samples and same_report and wall < 20 * 60
    finish(acceptance_line, "AC10", ok, f"{len(ckpt_a)} checkpoints identical={same_ckpt}, {len(samples_a)} sample "
                                        f"files identical={same_samples}, metrics.json identical={same_report}; "
                                        f"wall time per run {times[0]:.0f}s/{times[1]:.0f}s (<1200s)")
