"""Per-frame cues: location-scale, pose, accumulated ego-motion, flow grid.

Keypoints follow the 18-part OpenPose/COCO layout (see ``KEYPOINT_NAMES``).
Image coordinates are pixels with x to the right and y down.

Ego-motion convention. Camera axes are x right, y down, z forward (optical
axis). An ego frame ``(R_t, v_t)`` describes the motion between frames t-1
and t: ``R_t`` maps coordinates expressed in camera frame t-1 to camera frame
t (``x_t = R_t x_{t-1}`` for directions), and ``v_t`` is the camera
displacement expressed in camera frame t. Under this convention

    R'_t = R_t R'_{t-1},        v'_t = R'_t^{-1} v_t + v'_{t-1}

makes ``R'_t`` the map from the base frame (the camera just before the
window) to frame t, and ``v'_t`` the camera position in base coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidObservationError, UsageError, ValidationError

KEYPOINT_NAMES = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow",
    "l_wrist", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)
NUM_KEYPOINTS = 18
NOSE, NECK, R_HIP, L_HIP = 0, 1, 8, 11
# left/right pairs; nose and neck map to themselves
MIRROR_PAIRS = ((2, 5), (3, 6), (4, 7), (8, 11), (9, 12), (10, 13), (14, 15), (16, 17))
MIRROR_INDEX = np.arange(NUM_KEYPOINTS)
for _a, _b in MIRROR_PAIRS:
    MIRROR_INDEX[_a], MIRROR_INDEX[_b] = _b, _a

# Ingested coordinates are snapped to this grid (2**-10 px). Mirroring
# x -> W - x is then exact in float64, so horizontal flips are involutions.
KEYPOINT_QUANTUM = 2.0 ** -10

GRID_COLS, GRID_ROWS = 4, 3


def quantize(coords):
    return np.round(np.asarray(coords, dtype=np.float64) / KEYPOINT_QUANTUM) * KEYPOINT_QUANTUM


@dataclass
class FrameObservation:
    frame_index: int
    keypoints: np.ndarray   # [18, 2] pixels
    valid: np.ndarray       # [18] bool
    frame_width: float
    frame_height: float


@dataclass(frozen=True)
class LocationScale:
    x: float
    y: float
    s: float

    def as_array(self):
        return np.array([self.x, self.y, self.s])


def location_scale_from_keypoints(obs: FrameObservation) -> LocationScale:
    """Mid-hip location and neck-to-mid-hip distance."""
    kp, valid = np.asarray(obs.keypoints, dtype=np.float64), np.asarray(obs.valid, dtype=bool)
    if not (valid[L_HIP] and valid[R_HIP] and valid[NECK]):
        raise InvalidObservationError(f"frame {obs.frame_index}: hips or neck missing")
    loc = (kp[L_HIP] + kp[R_HIP]) / 2.0
    s = float(np.hypot(*(kp[NECK] - loc)))
    if not s > 0.0:
        raise InvalidObservationError(f"frame {obs.frame_index}: zero scale")
    return LocationScale(float(loc[0]), float(loc[1]), s)


def location_scale_sequence(keypoints, valid):
    """Vectorized location-scale over frames.

    keypoints [T, 18, 2], valid [T, 18] -> (xs [T, 3], ok [T] bool).
    Rows for frames that fail the hip/neck requirement hold NaN.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    loc = (kp[:, L_HIP] + kp[:, R_HIP]) / 2.0
    s = np.hypot(kp[:, NECK, 0] - loc[:, 0], kp[:, NECK, 1] - loc[:, 1])
    ok = valid[:, L_HIP] & valid[:, R_HIP] & valid[:, NECK] & (s > 0)
    xs = np.column_stack([loc, s])
    xs[~ok] = np.nan
    return xs, ok


def pose_from_keypoints(obs: FrameObservation, ls: LocationScale) -> np.ndarray:
    """36-vector of (keypoint - location) / scale; invalid points become (0, 0).

    Window-level imputation from earlier frames is done by :func:`pose_sequence`.
    """
    kp = np.asarray(obs.keypoints, dtype=np.float64)
    p = (kp - np.array([ls.x, ls.y])) / ls.s
    p[~np.asarray(obs.valid, dtype=bool)] = 0.0
    return p.reshape(-1)


def pose_sequence(keypoints, valid, xs):
    """Normalized pose for a window: [T, 18, 2], [T, 18], [T, 3] -> [T, 36].

    A keypoint missing in a frame takes its last valid normalized value in
    the window, or (0, 0) if it was never seen.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    p = (kp - xs[:, None, :2]) / xs[:, None, 2:3]
    last = np.zeros((NUM_KEYPOINTS, 2))
    out = np.empty_like(p)
    for t in range(p.shape[0]):
        last = np.where(valid[t][:, None], p[t], last)
        out[t] = last
    return out.reshape(p.shape[0], 2 * NUM_KEYPOINTS)


# --------------------------------------------------------------------------
# rotations

def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(yaw, roll, pitch):
    """Intrinsic yaw (about y, vertical), then pitch (about x), then roll (about z)."""
    return rot_y(yaw) @ rot_x(pitch) @ rot_z(roll)


def _wrap(a):
    # atan2 returns [-pi, pi]; fold -pi onto pi
    return np.pi if a == -np.pi else a


def euler_from_rotation(R):
    """Inverse of :func:`rotation_from_euler`; returns (yaw, roll, pitch).

    At gimbal lock (|pitch| = pi/2) roll is set to 0.
    """
    R = np.asarray(R, dtype=np.float64)
    sp = -R[1, 2]
    pitch = float(np.arcsin(np.clip(sp, -1.0, 1.0)))
    if abs(sp) < 1.0 - 1e-12:
        yaw = float(np.arctan2(R[0, 2], R[2, 2]))
        roll = float(np.arctan2(R[1, 0], R[1, 1]))
    else:
        roll = 0.0
        yaw = float(np.arctan2(-R[2, 0], R[0, 0]))
    return _wrap(yaw), _wrap(roll), pitch


def check_rotation(R, tol=1e-6):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValidationError("rotation must be a finite 3x3 matrix")
    if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValidationError("rotation matrix is not orthonormal with determinant 1")


def accumulate_ego(rotations, translations, order="left", first_frame="consistent"):
    """Accumulate per-frame ego-motion into the window's base frame.

    rotations [T, 3, 3], translations [T, 3] -> features [T, 6] holding
    (yaw, roll, pitch, x, y, z) of the accumulated rotation and translation.

    ``order="left"`` composes ``R'_t = R_t R'_{t-1}``; ``"right"`` uses
    ``R'_{t-1} R_t``. The two agree whenever consecutive rotations commute
    (e.g. yaw-only motion). ``first_frame="consistent"`` sets
    ``v'_first = R'^{-1}_first v_first`` (the recurrence with ``v'_0 = 0``);
    ``"literal"`` uses ``v'_first = v_first``.
    """
    if order not in ("left", "right"):
        raise UsageError(f"order must be 'left' or 'right', got {order!r}")
    if first_frame not in ("consistent", "literal"):
        raise UsageError(f"first_frame must be 'consistent' or 'literal', got {first_frame!r}")
    Rs = np.asarray(rotations, dtype=np.float64)
    vs = np.asarray(translations, dtype=np.float64)
    if Rs.ndim != 3 or Rs.shape[1:] != (3, 3) or vs.shape != (Rs.shape[0], 3):
        raise UsageError("expected rotations [T, 3, 3] and translations [T, 3]")
    feats = np.empty((Rs.shape[0], 6))
    acc_R = None
    acc_v = np.zeros(3)
    for t in range(Rs.shape[0]):
        check_rotation(Rs[t])
        if acc_R is None:
            acc_R = Rs[t].copy()
            step = vs[t] if first_frame == "literal" else acc_R.T @ vs[t]
        else:
            acc_R = Rs[t] @ acc_R if order == "left" else acc_R @ Rs[t]
            step = acc_R.T @ vs[t]
        acc_v = step + acc_v
        feats[t, :3] = euler_from_rotation(acc_R)
        feats[t, 3:] = acc_v
    return feats


# --------------------------------------------------------------------------
# optical-flow grid

def _edges(n, parts):
    base = n // parts
    return [i * base for i in range(parts)] + [n]


def flow_grid_feature(flow, cols=GRID_COLS, rows=GRID_ROWS):
    """Mean (u, v) flow per cell of a cols x rows grid, row-major -> [2*cols*rows].

    Cells are an integer partition of the image; leftover pixels go to the
    last row and column.
    """
    f = np.asarray(flow, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 2:
        raise UsageError(f"flow must be [H, W, 2], got {f.shape}")
    h, w = f.shape[:2]
    if h < rows or w < cols:
        raise UsageError(f"flow field {h}x{w} too small for a {cols}x{rows} grid")
    ye, xe = _edges(h, rows), _edges(w, cols)
    out = np.empty((rows, cols, 2))
    for r in range(rows):
        for c in range(cols):
            out[r, c] = f[ye[r]:ye[r + 1], xe[c]:xe[c + 1]].mean(axis=(0, 1))
    return out.reshape(-1)


def build_sample(tracklet, t0, t_prev=10, t_future=10, **kw):
    """Build the (X_in, E_in, P_in, X_out) sample anchored at tracklet index ``t0``.

    Thin alias of :func:`egoforecast.data.build_sample`, which owns the Sample type.
    """
    from .data import build_sample as _build

    return _build(tracklet, t0, t_prev, t_future, **kw)
