import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import periodic_texture
from portrait_anim.errors import ShapeError
from portrait_anim.flowmask import (
    FlowField,
    binary_mask,
    clip_weight_masks,
    estimate_flow,
    face_aware_loss,
    flow_mask_bundle,
    flow_threshold,
    foreground_mean,
    latent_weight_masks,
    normalized_mask,
    read_flow,
    resize_mask_to_latent,
    write_flow,
    write_weight_pgm,
)


def shifted_pair(seed, dx, dy, size=64):
    img = periodic_texture(np.random.default_rng(seed), size)
    return img, np.roll(img, (dy, dx), axis=(0, 1))


def test_identical_frames_zero_flow():
    img = periodic_texture(np.random.default_rng(0))
    flow = estimate_flow(img, img)
    assert max(np.abs(flow.u).max(), np.abs(flow.v).max()) < 1e-9


@pytest.mark.parametrize("dx,dy", [(2, 0), (-1, 3)])
def test_translation_recovered(dx, dy):
    a, b = shifted_pair(5, dx, dy)
    flow = estimate_flow(a, b)
    assert abs(flow.u.mean() - dx) < 0.5 and abs(flow.v.mean() - dy) < 0.5


def test_flow_shape_mismatch():
    with pytest.raises(ShapeError):
        estimate_flow(np.zeros((8, 8)), np.zeros((8, 9)))


def test_flow_threshold_examples():
    mag, tau = flow_threshold(FlowField.zeros(3, 4))
    assert tau == 0.0 and not mag.any()
    mag, tau = flow_threshold(FlowField(np.full((2, 3), 3.0), np.full((2, 3), 4.0)))
    assert tau == 5.0 and np.all(mag == 5.0)
    mag, tau = flow_threshold(FlowField(np.array([[1.0], [0.0]]), np.zeros((2, 1))))
    np.testing.assert_array_equal(mag, [[1.0], [0.0]])
    assert tau == 0.5


def test_binary_mask_examples():
    assert not binary_mask(np.full((3, 3), 2.0), 2.0).any()
    np.testing.assert_array_equal(binary_mask(np.array([1.0, 3, 5, 7]), 4.0), [0, 0, 1, 1])
    assert not binary_mask(np.zeros((2, 2)), 0.0).any()


def test_foreground_mean_examples():
    mags = np.array([1.0, 3, 5, 7])
    f, masked = foreground_mean(mags, np.array([0, 0, 1, 1]))
    assert f == 6.0
    np.testing.assert_array_equal(masked, [0, 0, 5, 7])
    f, masked = foreground_mean(mags, np.zeros(4))
    assert f == 0.0 and not masked.any()
    f, _ = foreground_mean(mags, np.ones(4))
    assert f == mags.mean()


def test_normalized_mask_examples():
    np.testing.assert_array_equal(normalized_mask(np.array([0.0, 255.0, 204.0])), [1.0, 1.5, 1.3])


def test_resize_examples():
    np.testing.assert_array_equal(resize_mask_to_latent(np.full((6, 10), 1.25), 3, 4), np.full((3, 4), 1.25))
    np.testing.assert_array_equal(resize_mask_to_latent(np.array([[1.0, 1.0], [1.5, 1.5]]), 1, 1), [[1.25]])
    m = np.random.default_rng(0).uniform(1, 1.5, (5, 7))
    out = resize_mask_to_latent(m, 5, 7)
    assert out.tobytes() == m.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(1, 12))
def test_resize_stays_in_range(seed, oh, ow):
    m = np.random.default_rng(seed).uniform(1.0, 1.5, (12, 12))
    out = resize_mask_to_latent(m, oh, ow)
    assert out.shape == (oh, ow)
    assert out.min() >= m.min() and out.max() <= m.max()


def test_loss_examples():
    e = torch.randn(2, 3, 3)
    w = torch.full((2, 3, 3), 1.3)
    assert face_aware_loss(e, e, w).item() == 0.0
    p = torch.randn(2, 3, 3)
    ones = torch.ones(2, 3, 3)
    assert face_aware_loss(e, p, ones).item() == ((e.double() - p.double()) ** 2).mean().item()
    val = face_aware_loss(torch.zeros(1, 2, 1), torch.tensor([[[1.0], [2.0]]]), torch.tensor([[[1.0], [1.5]]]))
    assert val.item() == 3.5


def test_loss_shape_errors():
    with pytest.raises(ShapeError):
        face_aware_loss(torch.zeros(2, 3), torch.zeros(3, 2), torch.ones(2, 3))
    with pytest.raises(ShapeError):
        face_aware_loss(torch.zeros(2, 3), torch.zeros(2, 3), torch.ones(3, 2))


def test_loss_channel_average():
    true = torch.zeros(1, 2, 1, 1)
    pred = torch.tensor([1.0, 3.0]).reshape(1, 2, 1, 1)
    assert face_aware_loss(true, pred, torch.full((1, 1, 1), 1.5)).item() == 1.5 * 5.0


def test_loss_bounded_by_mse():
    rng = np.random.default_rng(0)
    for _ in range(500):
        shape = tuple(rng.integers(1, 5, 3))
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        w = rng.uniform(1.0, 1.5, shape)
        mse = np.mean((a - b) ** 2)
        loss = face_aware_loss(a, b, w).item()
        assert mse * (1 - 1e-12) <= loss <= 1.5 * mse * (1 + 1e-12)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    true = torch.as_tensor(rng.normal(size=(4, 4, 4)))
    pred = torch.as_tensor(rng.normal(size=(4, 4, 4)), dtype=torch.float64).requires_grad_(True)
    w = torch.as_tensor(rng.uniform(1, 1.5, (4, 4, 4)))
    face_aware_loss(true, pred, w).backward()
    h = 1e-6
    num = torch.zeros_like(pred)
    base = pred.detach()
    for idx in np.ndindex(4, 4, 4):
        plus, minus = base.clone(), base.clone()
        plus[idx] += h
        minus[idx] -= h
        num[idx] = (face_aware_loss(true, plus, w) - face_aware_loss(true, minus, w)) / (2 * h)
    rel = (pred.grad - num).norm() / num.norm()
    assert rel < 1e-4


def test_mask_pipeline_range_on_random_pairs():
    rng = np.random.default_rng(2)
    for _ in range(200):
        a = rng.uniform(0, 1, (24, 24))
        b = np.clip(np.roll(a, tuple(rng.integers(-3, 4, 2)), axis=(0, 1)) + rng.normal(0, 0.05, a.shape), 0, 1)
        w = flow_mask_bundle(estimate_flow(a, b)).weight_mask
        assert w.min() >= 1.0 and w.max() <= 1.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_non_constant_field_has_background(seed):
    mag = np.random.default_rng(seed).exponential(size=(6, 5))
    if np.ptp(mag) > 0:
        assert (binary_mask(mag, mag.mean()) == 0).any()


def test_uniform_flow_degrades_to_unit_weights():
    bundle = flow_mask_bundle(FlowField(np.full((4, 4), 2.0), np.zeros((4, 4))))
    assert bundle.foreground_count == 0 and np.all(bundle.weight_mask == 1.0)


def test_clip_masks_frame_zero_and_pooling():
    frames = np.stack([np.roll(periodic_texture(np.random.default_rng(3), 32), i, axis=1) for i in range(4)])
    masks, bundles = clip_weight_masks(frames[..., None].repeat(3, -1))
    assert bundles[0] is None and np.all(masks[0] == 1.0)
    assert masks.shape == (4, 32, 32) and masks.min() >= 1.0 and masks.max() <= 1.5
    lat = latent_weight_masks(masks, 2, 8, 8)
    assert lat.shape == (2, 8, 8)
    with pytest.raises(ShapeError):
        latent_weight_masks(masks, 3, 8, 8)


def test_flow_file_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    flow = FlowField(rng.normal(size=(5, 7)).astype(np.float32), rng.normal(size=(5, 7)).astype(np.float32))
    path = tmp_path / "f.flo"
    write_flow(path, flow)
    data = path.read_bytes()
    assert data[:8] == b"SKA1FLOW" and len(data) == 20 + 5 * 7 * 8
    back = read_flow(path)
    np.testing.assert_array_equal(back.u, flow.u)
    np.testing.assert_array_equal(back.v, flow.v)
    path.write_bytes(b"NOTAFLOW" + data[8:])
    with pytest.raises(ValueError):
        read_flow(path)


def test_weight_pgm(tmp_path):
    path = tmp_path / "w.pgm"
    write_weight_pgm(path, np.array([[1.0, 1.5]]))
    assert path.read_bytes().startswith(b"P5")
