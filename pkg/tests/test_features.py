import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from egoforecast import features as ft
from egoforecast.errors import InvalidObservationError, UsageError, ValidationError


def frame(points, valid=None, width=1280.0):
    kp = np.zeros((18, 2))
    v = np.zeros(18, dtype=bool) if valid is None else valid
    for i, p in points.items():
        kp[i] = p
        if valid is None:
            v[i] = True
    return ft.FrameObservation(0, kp, v, width, 960.0)


BASIC = {ft.R_HIP: (100, 200), ft.L_HIP: (140, 200), ft.NECK: (120, 140)}


# --- location-scale -----------------------------------------------------------

def test_location_scale_hand_geometry():
    ls = ft.location_scale_from_keypoints(frame(BASIC))
    assert (ls.x, ls.y, ls.s) == (120.0, 200.0, 60.0)


def test_location_scale_degenerate():
    pts = {ft.R_HIP: (120, 200), ft.L_HIP: (120, 200), ft.NECK: (120, 200)}
    with pytest.raises(InvalidObservationError):
        ft.location_scale_from_keypoints(frame(pts))


def test_location_scale_missing_hip():
    with pytest.raises(InvalidObservationError):
        ft.location_scale_from_keypoints(frame({ft.R_HIP: (1, 2), ft.NECK: (3, 4)}))


def test_location_scale_mirror():
    w = 1280.0
    mirrored = {i: (w - x, y) for i, (x, y) in BASIC.items()}
    a = ft.location_scale_from_keypoints(frame(BASIC))
    b = ft.location_scale_from_keypoints(frame(mirrored))
    assert b.x == w - a.x and b.y == a.y and b.s == a.s


def test_location_scale_sequence_marks_bad_frames():
    kp = np.zeros((2, 18, 2))
    valid = np.zeros((2, 18), dtype=bool)
    for i, p in BASIC.items():
        kp[0, i] = p
        valid[0, i] = True
    xs, ok = ft.location_scale_sequence(kp, valid)
    assert ok.tolist() == [True, False]
    assert xs[0].tolist() == [120.0, 200.0, 60.0] and np.isnan(xs[1]).all()


# --- pose -----------------------------------------------------------------------

def test_pose_normalization_by_construction():
    pts = dict(BASIC)
    pts[ft.NOSE] = (120, 200)
    obs = frame(pts)
    p = ft.pose_from_keypoints(obs, ft.location_scale_from_keypoints(obs)).reshape(18, 2)
    assert p[ft.NOSE].tolist() == [0.0, 0.0]
    assert np.hypot(*p[ft.NECK]) == 1.0
    assert p[5].tolist() == [0.0, 0.0]  # invalid keypoint


def test_pose_scale_invariance():
    rng = np.random.default_rng(0)
    kp = rng.uniform(0, 500, (18, 2))
    obs = ft.FrameObservation(0, kp, np.ones(18, dtype=bool), 1280, 960)
    ls = ft.location_scale_from_keypoints(obs)
    l = np.array([ls.x, ls.y])
    big = ft.FrameObservation(0, l + 2 * (kp - l), np.ones(18, dtype=bool), 1280, 960)
    p1 = ft.pose_from_keypoints(obs, ls)
    p2 = ft.pose_from_keypoints(big, ft.location_scale_from_keypoints(big))
    assert np.allclose(p1, p2, atol=1e-12)


def test_pose_sequence_imputes_last_valid():
    kp = np.tile(np.arange(36.0).reshape(18, 2), (3, 1, 1))
    valid = np.ones((3, 18), dtype=bool)
    valid[1, 4] = valid[2, 4] = False
    valid[:, 7] = False
    xs = np.tile([0.0, 0.0, 1.0], (3, 1))
    kp[1:, 4] = 999.0
    p = ft.pose_sequence(kp, valid, xs).reshape(3, 18, 2)
    assert p[2, 4].tolist() == [8.0, 9.0]
    assert p[:, 7].tolist() == [[0.0, 0.0]] * 3


# --- rotations --------------------------------------------------------------

def test_euler_identity():
    assert ft.euler_from_rotation(np.eye(3)) == (0.0, 0.0, 0.0)


def test_euler_pure_yaw():
    yaw, roll, pitch = ft.euler_from_rotation(ft.rot_y(0.3))
    assert np.isclose(yaw, 0.3, atol=1e-15) and roll == 0.0 and pitch == 0.0


def test_rotation_matches_scipy_intrinsic_yxz():
    rng = np.random.default_rng(1)
    for _ in range(200):
        yaw, roll = rng.uniform(-np.pi, np.pi, 2)
        pitch = rng.uniform(-np.pi / 2, np.pi / 2)
        ref = Rotation.from_euler("YXZ", [yaw, pitch, roll]).as_matrix()
        assert np.allclose(ft.rotation_from_euler(yaw, roll, pitch), ref, atol=1e-14)


def test_euler_round_trip_1000():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        a = (rng.uniform(-np.pi, np.pi), rng.uniform(-np.pi, np.pi), rng.uniform(-1.5, 1.5))
        b = ft.euler_from_rotation(ft.rotation_from_euler(*a))
        worst = max(worst, np.abs(np.array(a) - np.array(b)).max())
    assert worst < 1e-9


def test_euler_matches_scipy_on_random_rotations():
    R = Rotation.random(100, random_state=3)
    for m, ref in zip(R.as_matrix(), R.as_euler("YXZ")):
        yaw, roll, pitch = ft.euler_from_rotation(m)
        assert np.allclose([yaw, pitch, roll], ref, atol=1e-9)


def test_euler_gimbal_lock_roll_zero():
    R = ft.rotation_from_euler(0.4, 0.0, np.pi / 2)
    yaw, roll, pitch = ft.euler_from_rotation(R)
    assert roll == 0.0 and np.isclose(pitch, np.pi / 2)
    assert np.allclose(ft.rotation_from_euler(yaw, roll, pitch), R, atol=1e-12)


def test_euler_range_half_open():
    yaw, _, _ = ft.euler_from_rotation(ft.rot_y(np.pi))
    assert yaw == np.pi


def test_check_rotation_rejects():
    with pytest.raises(ValidationError):
        ft.check_rotation(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValidationError):
        ft.check_rotation(np.eye(3) * 1.1)


# --- ego accumulation -------------------------------------------------------

def test_accumulate_pure_forward():
    T = 7
    e = ft.accumulate_ego(np.repeat(np.eye(3)[None], T, 0), np.tile([0.0, 0.0, 1.0], (T, 1)))
    assert np.array_equal(e[:, :3], np.zeros((T, 3)))
    assert np.array_equal(e[:, 5], np.arange(1.0, T + 1))


def test_accumulate_zero_motion_exact():
    e = ft.accumulate_ego(np.repeat(np.eye(3)[None], 10, 0), np.zeros((10, 3)))
    assert not e.any()


def test_accumulate_constant_yaw():
    delta, T = 0.5, 12
    e = ft.accumulate_ego(np.repeat(ft.rot_y(delta)[None], T, 0), np.zeros((T, 3)))
    expect = np.angle(np.exp(1j * delta * np.arange(1, T + 1)))
    expect[np.isclose(expect, -np.pi)] = np.pi
    assert np.allclose(e[:, 0], expect, atol=1e-12)
    assert np.allclose(e[:, 1:], 0.0, atol=1e-12)


def test_accumulate_matches_matrix_product_oracle():
    # accumulated rotation equals the left-ordered product of per-frame rotations
    R = Rotation.random(6, random_state=4).as_matrix()
    v = np.random.default_rng(5).standard_normal((6, 3))
    e = ft.accumulate_ego(R, v)
    acc, pos = np.eye(3), np.zeros(3)
    for t in range(6):
        acc = R[t] @ acc
        pos = pos + np.linalg.solve(acc, v[t])
        assert np.allclose(ft.rotation_from_euler(*e[t, :3]), acc, atol=1e-10)
        assert np.allclose(e[t, 3:], pos, atol=1e-12)


def test_accumulate_right_order_agrees_for_commuting():
    R = np.stack([ft.rot_y(a) for a in (0.1, -0.3, 0.2)])
    v = np.ones((3, 3))
    assert np.allclose(ft.accumulate_ego(R, v), ft.accumulate_ego(R, v, order="right"))


def test_accumulate_literal_first_frame():
    R = ft.rot_y(0.3)[None]
    v = np.array([[1.0, 0.0, 0.0]])
    assert np.allclose(ft.accumulate_ego(R, v, first_frame="literal")[0, 3:], v[0])
    assert np.allclose(ft.accumulate_ego(R, v)[0, 3:], R[0].T @ v[0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_accumulate_prefix_consistency(seed, T):
    # features for frame t depend only on frames up to t
    R = Rotation.random(T, random_state=seed).as_matrix()
    v = np.random.default_rng(seed).standard_normal((T, 3))
    full = ft.accumulate_ego(R, v)
    assert np.array_equal(full[:T - 1], ft.accumulate_ego(R[:T - 1], v[:T - 1]))


def test_accumulate_rejects_bad_rotation():
    with pytest.raises(ValidationError):
        ft.accumulate_ego(np.ones((2, 3, 3)), np.zeros((2, 3)))


def test_accumulate_bad_options():
    with pytest.raises(UsageError):
        ft.accumulate_ego(np.eye(3)[None], np.zeros((1, 3)), order="middle")


# --- flow grid --------------------------------------------------------------

def test_flow_uniform():
    f = np.empty((48, 64, 2))
    f[..., 0], f[..., 1] = 1.5, -0.25
    assert np.array_equal(ft.flow_grid_feature(f), np.tile([1.5, -0.25], 12))


def test_flow_zero():
    assert not ft.flow_grid_feature(np.zeros((30, 40, 2))).any()


def test_flow_half_split_against_direct_average():
    # width 10 over 4 columns: cells [0,2) [2,4) [4,6) [6,10); left half = +1
    f = np.zeros((9, 10, 2))
    f[:, :5, 0], f[:, 5:, 0] = 1.0, -1.0
    g = ft.flow_grid_feature(f).reshape(3, 4, 2)
    oracle = [np.mean(np.where(np.arange(a, b) < 5, 1.0, -1.0)) for a, b in [(0, 2), (2, 4), (4, 6), (6, 10)]]
    assert oracle == [1.0, 1.0, 0.0, -1.0]
    for r in range(3):
        assert np.allclose(g[r, :, 0], oracle) and not g[r, :, 1].any()


def test_flow_empty_field():
    with pytest.raises(UsageError):
        ft.flow_grid_feature(np.zeros((0, 0, 2)))


# --- quantization -----------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.floats(0, 4000, allow_nan=False))
def test_quantized_mirror_is_exact(x):
    q = float(ft.quantize(x))
    assert 1280.0 - (1280.0 - q) == q
