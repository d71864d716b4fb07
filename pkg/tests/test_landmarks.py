import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from portrait_anim.errors import DegenerateGeometryError, ShapeError
from portrait_anim.landmarks import (
    MOUTH_PAIRS,
    NUM_LANDMARKS,
    HeadPose,
    LandmarkFrame,
    LandmarkSequence,
    Placement,
    aperture,
    canonical_template,
    face_shape,
    head_angle_range,
    head_pose_from_landmarks,
    mouth_variation,
    procrustes_rotation,
    rasterize_landmarks,
    rasterize_sequence,
    rotation_matrix,
)

TEMPLATE = canonical_template()


def rotated(template, yaw, pitch, roll):
    # Independent rotation oracle: scipy intrinsic Y-X-Z (yaw about y, then pitch, then roll).
    rot = Rotation.from_euler("YXZ", [yaw, pitch, roll]).as_matrix()
    return LandmarkFrame(template.points @ rot.T)


def test_rotation_matrix_matches_scipy_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.uniform(-1.2, 1.2, 3)
        np.testing.assert_allclose(rotation_matrix(*a), Rotation.from_euler("YXZ", a).as_matrix(), atol=1e-14)


def test_template_against_itself_is_zero_pose():
    pose = head_pose_from_landmarks(TEMPLATE, TEMPLATE)
    np.testing.assert_allclose(pose.as_array(), 0.0, atol=1e-12)


def test_pure_yaw_recovered():
    pose = head_pose_from_landmarks(rotated(TEMPLATE, math.radians(30), 0, 0), TEMPLATE)
    np.testing.assert_allclose(pose.as_array(), [math.radians(30), 0, 0], atol=1e-6)


def test_composed_rotation_recovered():
    angles = np.radians([10.0, -5.0, 20.0])
    pose = head_pose_from_landmarks(rotated(TEMPLATE, *angles), TEMPLATE)
    np.testing.assert_allclose(pose.as_array(), angles, atol=1e-6)


def test_procrustes_matches_scipy_align_vectors():
    rng = np.random.default_rng(3)
    rot = Rotation.random(random_state=4).as_matrix()
    src = rng.normal(size=(30, 3))
    dst = src @ rot.T + rng.normal(scale=0.01, size=src.shape)
    ours = procrustes_rotation(src, dst)
    c_src, c_dst = src - src.mean(0), dst - dst.mean(0)
    oracle, _ = Rotation.align_vectors(c_dst, c_src)
    np.testing.assert_allclose(ours, oracle.as_matrix(), atol=1e-9)


def test_rotation_equivariance_100_random():
    rng = np.random.default_rng(1)
    for _ in range(100):
        rot = Rotation.random(random_state=rng).as_matrix()
        frame = LandmarkFrame(TEMPLATE.points @ rot.T)
        pose = head_pose_from_landmarks(frame, TEMPLATE)
        assert np.linalg.norm(rotation_matrix(*pose.as_array()) - rot) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.floats(-0.9, 0.9),
       st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_pose_translation_invariant(yaw, pitch, roll, offset):
    frame = rotated(TEMPLATE, yaw, pitch, roll)
    moved = LandmarkFrame(frame.points + np.asarray(offset))
    a = head_pose_from_landmarks(frame, TEMPLATE).as_array()
    b = head_pose_from_landmarks(moved, TEMPLATE).as_array()
    assert np.abs(a - b).max() <= 1e-9


def test_degenerate_geometry_raises():
    line = np.zeros((NUM_LANDMARKS, 3))
    line[:, 0] = np.linspace(-1, 1, NUM_LANDMARKS)
    with pytest.raises(DegenerateGeometryError):
        head_pose_from_landmarks(LandmarkFrame(line), TEMPLATE)
    with pytest.raises(DegenerateGeometryError):
        head_pose_from_landmarks(LandmarkFrame(np.ones((NUM_LANDMARKS, 3))), TEMPLATE)


def test_pose_requires_matching_k():
    with pytest.raises(ShapeError):
        head_pose_from_landmarks(LandmarkFrame(np.eye(3)), TEMPLATE)


def test_head_pose_range_validated():
    HeadPose(math.pi, -math.pi, 0.0)
    with pytest.raises(ValueError):
        HeadPose(4.0, 0.0, 0.0)


def seq_with_apertures(values):
    return LandmarkSequence.from_points(np.stack([face_shape(mouth_open=v) for v in values]))


def test_mouth_aperture_is_scripted_value():
    np.testing.assert_allclose(aperture(face_shape(mouth_open=0.37), MOUTH_PAIRS), 0.37, atol=1e-12)


def test_mouth_variation_constant_is_zero():
    assert mouth_variation(seq_with_apertures([0.2] * 6)) == 0.0


def test_mouth_variation_alternating():
    assert mouth_variation(seq_with_apertures([0.0, 1.0] * 4)) == pytest.approx(0.5, abs=1e-12)


def test_mouth_variation_ramp():
    ramp = [0.0, 0.25, 0.5, 0.75, 1.0]
    assert mouth_variation(seq_with_apertures(ramp)) == pytest.approx(np.std(ramp), abs=1e-12)


def test_mouth_variation_single_frame_is_zero():
    assert mouth_variation(seq_with_apertures([0.4])) == 0.0


def test_mouth_variation_checks_indices():
    with pytest.raises(IndexError):
        mouth_variation(seq_with_apertures([0.1, 0.2]), [(0, 200)])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=8), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_mouth_variation_translation_invariant(values, offset):
    seq = seq_with_apertures(values)
    moved = LandmarkSequence.from_points(seq.points + np.asarray(offset))
    assert abs(mouth_variation(seq) - mouth_variation(moved)) < 1e-9


def test_rasterize_centre_landmark():
    img = rasterize_landmarks(LandmarkFrame(np.zeros((1, 3))), 9, 7, radius=1.0)
    assert img[3, 4] == 1.0
    assert img[0, 0] == img[0, -1] == img[-1, 0] == img[-1, -1] == 0.0


def test_rasterize_radius_zero_one_pixel_each():
    pts = np.array([[-0.5, 0.5, 0.0], [0.5, -0.5, 0.0], [0.0, 0.0, 0.0]])
    img = rasterize_landmarks(LandmarkFrame(pts), 16, 16, radius=0.0)
    assert img.sum() == 3.0


def test_rasterize_out_of_bounds_is_blank():
    pts = np.array([[3.0, 0.0, 0.0], [0.0, -2.5, 0.0], [-1.5, 1.5, 0.0]])
    assert rasterize_landmarks(LandmarkFrame(pts), 12, 12).sum() == 0.0


def test_rasterize_rejects_empty_image():
    with pytest.raises(ValueError):
        rasterize_landmarks(LandmarkFrame(np.zeros((1, 3))), 0, 5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_rasterize_range_and_radius_monotone(seed, r1, r2):
    pts = np.random.default_rng(seed).uniform(-1.2, 1.2, (20, 3))
    lo, hi = sorted((r1, r2))
    a = rasterize_landmarks(LandmarkFrame(pts), 24, 20, lo)
    b = rasterize_landmarks(LandmarkFrame(pts), 24, 20, hi)
    assert a.min() >= 0.0 and b.max() <= 1.0
    assert a.sum() <= b.sum()


def test_rasterize_sequence_places_face():
    seq = LandmarkSequence.from_points(np.stack([face_shape()] * 2))
    out = rasterize_sequence(seq, Placement(15.5, 15.5, 8.0), 32, 32)
    assert out.shape == (2, 32, 32) and out.sum() > 0


def test_sequence_json_round_trip(tmp_path):
    seq = LandmarkSequence.from_points(np.random.default_rng(0).normal(size=(3, NUM_LANDMARKS, 3)), Fraction(30000, 1001))
    path = tmp_path / "lm.json"
    seq.save(path)
    back = LandmarkSequence.load(path)
    assert back.fps == Fraction(30000, 1001)
    np.testing.assert_array_equal(back.points, seq.points)
    doc = seq.to_json()
    assert doc["v"] == 1 and doc["k"] == NUM_LANDMARKS


def test_sequence_invariants():
    with pytest.raises(ValueError):
        LandmarkSequence([])
    f = LandmarkFrame(np.zeros((4, 3)), 1)
    with pytest.raises(ValueError):
        LandmarkSequence([f, LandmarkFrame(np.zeros((4, 3)), 1)])
    with pytest.raises(ShapeError):
        LandmarkSequence([f, LandmarkFrame(np.zeros((5, 3)), 2)])
    with pytest.raises(ValueError):
        LandmarkFrame(np.full((4, 3), np.nan))


def test_head_angle_range_of_static_sequence_is_zero():
    seq = LandmarkSequence.from_points(np.stack([face_shape()] * 4))
    assert head_angle_range(seq) == pytest.approx(0.0, abs=1e-12)
