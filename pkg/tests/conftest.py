import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from portrait_anim.model import ModelConfig, build_model  # noqa: E402

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(label: str, ok: bool, detail: str) -> None:
        line = f"{label} {'PASS' if ok else 'FAIL'}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_cfg():
    return ModelConfig.tiny()


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=0)


def periodic_texture(rng: np.random.Generator, size: int = 64, max_freq: int = 4) -> np.ndarray:
    """Random band-limited texture that tiles exactly on a size x size grid."""
    y, x = np.mgrid[:size, :size] / size
    img = np.zeros((size, size))
    for fy in range(-max_freq, max_freq + 1):
        for fx in range(0, max_freq + 1):
            if fx == 0 and fy <= 0:
                continue
            amp = rng.normal() / (fx * fx + fy * fy) ** 0.75
            img += amp * np.cos(2 * np.pi * (fx * x + fy * y) + rng.uniform(0, 2 * np.pi))
    img -= img.min()
    return img / img.max()


def tiny_examples(model, seeds=(0,), profile="talking", n_frames=None):
    """Training examples rendered directly at the model's pixel size."""
    from portrait_anim.datapipe.synth import synth_clip
    from portrait_anim.inference import vision_encoder_for
    from portrait_anim.model import face_extract, vision_encode
    from portrait_anim.training import clip_examples

    cfg = model.cfg
    enc = vision_encoder_for(model)
    out = []
    for seed in seeds:
        clip = synth_clip(seed, n_frames or cfg.pixel_frames, profile, cfg.pixel_width, cfg.pixel_height)
        emb = vision_encode(enc, face_extract(clip.frames[0], cfg.face_size, clip.face_boxes[0][0]).image)
        out += clip_examples(model, f"clip{seed}", clip.frames, clip.landmarks, clip.placements[0], emb)
    return out


@pytest.fixture(scope="session")
def pipeline_homes(tmp_path_factory):
    """Two full tiny-pipeline runs through the CLI, in separate homes, with wall times."""
    import time

    from portrait_anim.cli import main

    homes, times = [], []
    for name in ("run_a", "run_b"):
        home = tmp_path_factory.mktemp(name)
        t0 = time.perf_counter()
        code = main(["pipeline", "--home", str(home), "--seed", "0"])
        times.append(time.perf_counter() - t0)
        assert code == 0
        homes.append(home)
    return homes, times
