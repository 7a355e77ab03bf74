"""Deterministic synthetic first-person scenes.

A chest-mounted pinhole camera (optical axis parallel to the ground) moves
with a scripted walking speed and yaw rate; scripted pedestrians walk on the
ground plane and are rendered as 18 projected keypoints. Only geometry is
produced: tracklets in the ingestion format, exact per-frame ego-motion, and
a ground-truth sidecar.

World frame: x right, y down, z forward at the start pose; the ground is
y = 0, so heights are negative y. A heading ``h`` means the ground direction
``(sin h, cos h)`` in (x, z).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import features as ft
from .data import SampleSet, Tracklet, sliding_window
from .errors import FormatError, UsageError

SUITES = ("linear", "curved_ego", "interactive")

# (lateral, height, forward) as fractions of body height; +lateral is the
# person's right side
BODY_TEMPLATE = np.array([
    (0.0, 0.935, 0.06),     # nose
    (0.0, 0.87, 0.0),       # neck
    (0.13, 0.82, 0.0),      # r_shoulder
    (0.15, 0.63, 0.0),      # r_elbow
    (0.15, 0.48, 0.0),      # r_wrist
    (-0.13, 0.82, 0.0),     # l_shoulder
    (-0.15, 0.63, 0.0),     # l_elbow
    (-0.15, 0.48, 0.0),     # l_wrist
    (0.085, 0.53, 0.0),     # r_hip
    (0.085, 0.285, 0.0),    # r_knee
    (0.085, 0.04, 0.0),     # r_ankle
    (-0.085, 0.53, 0.0),    # l_hip
    (-0.085, 0.285, 0.0),   # l_knee
    (-0.085, 0.04, 0.0),    # l_ankle
    (0.03, 0.95, 0.05),     # r_eye
    (-0.03, 0.95, 0.05),    # l_eye
    (0.07, 0.94, 0.0),      # r_ear
    (-0.07, 0.94, 0.0),     # l_ear
])
# forward swing amplitude (m at 1.4 m/s) and phase sign per keypoint
SWING = np.zeros(ft.NUM_KEYPOINTS)
SWING[[9, 10, 12, 13]] = [0.12, 0.25, -0.12, -0.25]
SWING[[3, 4, 6, 7]] = [-0.07, -0.15, 0.07, 0.15]
FACE = [0, 14, 15]
MIN_DEPTH = 0.3


@dataclass
class CameraSpec:
    height_m: float = 1.4
    focal_px: float = 1000.0
    width_px: int = 1280
    height_px: int = 960

    @property
    def half_fov_tan(self):
        return self.width_px / 2.0 / self.focal_px


@dataclass
class PedestrianScript:
    start: tuple                 # (x, z) on the ground, metres
    heading: float               # rad
    speed: float = 1.3           # m/s
    turn_rate: float = 0.0       # rad/s
    body_height: float = 1.7
    gait_freq: float = 1.8       # Hz
    gait_phase: float = 0.0
    facing_lead: float = 0.0     # s; body faces where it will be heading
    facing: float | None = None  # fixed facing, used when speed is 0
    avoid: bool = False
    turns: list = field(default_factory=list)  # (t_start s, duration s, heading change rad)

    def heading_rate(self, t):
        rate = self.turn_rate
        for start, dur, delta in self.turns:
            if start <= t < start + dur:
                rate += delta / dur
        return rate


@dataclass
class SceneScript:
    video_id: str
    seed: int = 0
    duration_frames: int = 40
    fps: float = 10.0
    wearer_speed: list = field(default_factory=lambda: [(0.0, 0.0)])     # (t, m/s) knots
    wearer_yaw_rate: list = field(default_factory=lambda: [(0.0, 0.0)])  # (t, rad/s) knots
    pedestrians: list = field(default_factory=list)
    camera: CameraSpec = field(default_factory=CameraSpec)
    ego_kind: str = "rotation_translation"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["camera"] = CameraSpec(**d.get("camera", {}))
        d["pedestrians"] = [PedestrianScript(**p) for p in d.get("pedestrians", [])]
        for ped in d["pedestrians"]:
            ped.turns = [tuple(e) for e in ped.turns]
            if any(len(e) != 3 or e[1] <= 0 for e in ped.turns):
                raise UsageError("turns are (start, positive duration, heading change) triples")
        d["wearer_speed"] = [tuple(k) for k in d.get("wearer_speed", [(0.0, 0.0)])]
        d["wearer_yaw_rate"] = [tuple(k) for k in d.get("wearer_yaw_rate", [(0.0, 0.0)])]
        script = cls(**d)
        if script.duration_frames < 1 or script.fps <= 0:
            raise UsageError("duration_frames and fps must be positive")
        if script.ego_kind not in ("rotation_translation", "flow_grid"):
            raise UsageError(f"unknown ego_kind {script.ego_kind!r}")
        return script


def _knots(knots, t):
    k = np.asarray(knots, dtype=np.float64).reshape(-1, 2)
    return np.interp(t, k[:, 0], k[:, 1])


@dataclass
class GroundTruthScene:
    script: SceneScript
    wearer_pos: np.ndarray     # [F, 2] (x, z); index 0 is the pre-roll frame
    wearer_yaw: np.ndarray     # [F]
    ped_pos: np.ndarray        # [P, F, 2]
    ped_heading: np.ndarray    # [P, F]
    ped_facing: np.ndarray     # [P, F]
    keypoints: np.ndarray      # [P, F, 18, 2]
    valid: np.ndarray          # [P, F, 18]
    ego_rot: np.ndarray        # [F, 3, 3]
    ego_trans: np.ndarray      # [F, 3]
    flow24: np.ndarray | None = None

    def camera_center(self, i):
        x, z = self.wearer_pos[i]
        return np.array([x, -self.script.camera.height_m, z])

    def keypoints_world(self, p, i):
        return _body_points(self.script.pedestrians[p], self.ped_pos[p, i], self.ped_facing[p, i],
                            self._ped_speed(p, i), i / self.script.fps)

    def _ped_speed(self, p, i):
        return self.script.pedestrians[p].speed

    def project(self, p, i):
        """Re-project pedestrian ``p`` at frame ``i``: (keypoints [18, 2], valid [18])."""
        return _project(self.keypoints_world(p, i), self.camera_center(i), self.wearer_yaw[i],
                        self.script.camera, self.ped_pos[p, i], self.ped_facing[p, i])

    def to_json(self):
        return {
            "video_id": self.script.video_id, "fps": self.script.fps,
            "wearer": {"pos": self.wearer_pos.tolist(), "yaw": self.wearer_yaw.tolist()},
            "pedestrians": [{"pos": self.ped_pos[p].tolist(), "heading": self.ped_heading[p].tolist(),
                             "facing": self.ped_facing[p].tolist()}
                            for p in range(len(self.ped_pos))],
        }


def _body_points(ped, pos, facing, speed, t):
    h = ped.body_height
    right = np.array([np.cos(facing), -np.sin(facing)])
    fwd = np.array([np.sin(facing), np.cos(facing)])
    gait = min(speed / 1.4, 1.3) * np.sin(2 * np.pi * ped.gait_freq * t + ped.gait_phase)
    lat = BODY_TEMPLATE[:, 0] * h
    ahead = BODY_TEMPLATE[:, 2] * h + SWING * gait
    ground = pos[None, :] + lat[:, None] * right[None, :] + ahead[:, None] * fwd[None, :]
    return np.column_stack([ground[:, 0], -BODY_TEMPLATE[:, 1] * h, ground[:, 1]])


def _project(points, center, yaw, cam, ped_pos, facing):
    pc = (points - center) @ ft.rot_y(yaw)   # row-vector form of R_wc^T (X - C)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.focal_px * pc[:, 0] / z + cam.width_px / 2.0
        v = cam.focal_px * pc[:, 1] / z + cam.height_px / 2.0
    ok = (z > MIN_DEPTH) & (u >= 0) & (u <= cam.width_px) & (v >= 0) & (v <= cam.height_px)
    to_cam = np.array([center[0] - ped_pos[0], center[2] - ped_pos[1]])
    if np.sin(facing) * to_cam[0] + np.cos(facing) * to_cam[1] < 0:
        ok[FACE] = False
    kp = np.where(ok[:, None], np.column_stack([u, v]), 0.0)
    return ft.quantize(kp), ok


def _flow_feature(R, v, cam, step=16, far_depth=15.0):
    """Grid-averaged image motion of a ground plane plus a far backdrop."""
    us = np.arange(step / 2, cam.width_px, step)
    vs = np.arange(step / 2, cam.height_px, step)
    uu, vv = np.meshgrid(us, vs)
    dv = vv - cam.height_px / 2.0
    with np.errstate(divide="ignore"):
        ground_z = np.where(dv > 0, cam.focal_px * cam.height_m / np.maximum(dv, 1e-9), np.inf)
    z = np.minimum(ground_z, far_depth)
    pts = np.stack([(uu - cam.width_px / 2.0) * z / cam.focal_px, dv * z / cam.focal_px, z], axis=-1)
    moved = pts @ R.T - v
    zu = moved[..., 2]
    u2 = cam.focal_px * moved[..., 0] / zu + cam.width_px / 2.0
    v2 = cam.focal_px * moved[..., 1] / zu + cam.height_px / 2.0
    flow = np.stack([u2 - uu, v2 - vv], axis=-1)
    return ft.flow_grid_feature(flow)


def generate_scene(script: SceneScript, min_length=20):
    """Integrate a script at its frame rate. Returns (GroundTruthScene, tracklets).

    Frame 0 is a pre-roll pose used only to define the ego-motion of frame 1;
    tracklets cover frames 1..duration_frames and keep only runs where hips
    and neck are visible for at least ``min_length`` frames.
    """
    dt = 1.0 / script.fps
    n = script.duration_frames + 1
    cam = script.camera
    yaw = np.zeros(n)
    pos = np.zeros((n, 2))
    for i in range(1, n):
        t_mid = (i - 0.5) * dt
        yaw[i] = yaw[i - 1] + dt * _knots(script.wearer_yaw_rate, t_mid)
        step = dt * _knots(script.wearer_speed, t_mid)
        pos[i] = pos[i - 1] + step * np.array([np.sin(yaw[i]), np.cos(yaw[i])])

    ego_rot = np.empty((n, 3, 3))
    ego_trans = np.empty((n, 3))
    ego_rot[0], ego_trans[0] = np.eye(3), np.zeros(3)
    for i in range(1, n):
        ego_rot[i] = ft.rot_y(yaw[i - 1] - yaw[i])
        d = np.array([pos[i, 0] - pos[i - 1, 0], 0.0, pos[i, 1] - pos[i - 1, 1]])
        ego_trans[i] = ft.rot_y(yaw[i]).T @ d

    peds = script.pedestrians
    P = len(peds)
    ped_pos = np.zeros((P, n, 2))
    ped_heading = np.zeros((P, n))
    for p, ped in enumerate(peds):
        ped_pos[p, 0] = ped.start
        ped_heading[p, 0] = ped.heading
        for i in range(1, n):
            h = ped_heading[p, i - 1] + dt * ped.heading_rate((i - 0.5) * dt)
            if ped.avoid and ped.speed > 0:
                h += dt * _avoid_turn(ped_pos[p, i - 1], h, pos[i - 1], yaw[i - 1])
            ped_heading[p, i] = h
            ped_pos[p, i] = ped_pos[p, i - 1] + dt * ped.speed * np.array([np.sin(h), np.cos(h)])

    ped_facing = np.zeros((P, n))
    for p, ped in enumerate(peds):
        if ped.speed > 0:
            lead = int(round(ped.facing_lead * script.fps))
            ped_facing[p] = ped_heading[p, np.minimum(np.arange(n) + lead, n - 1)]
        else:
            ped_facing[p] = ped.heading if ped.facing is None else ped.facing

    kps = np.zeros((P, n, ft.NUM_KEYPOINTS, 2))
    valid = np.zeros((P, n, ft.NUM_KEYPOINTS), dtype=bool)
    flow = None
    if script.ego_kind == "flow_grid":
        flow = np.zeros((n, 24))
        for i in range(1, n):
            flow[i] = _flow_feature(ego_rot[i], ego_trans[i], cam)
    scene = GroundTruthScene(script, pos, yaw, ped_pos, ped_heading, ped_facing, kps, valid,
                             ego_rot, ego_trans, flow)
    for p in range(P):
        for i in range(n):
            kps[p, i], valid[p, i] = scene.project(p, i)

    tracklets = []
    for p in range(P):
        _, ok = ft.location_scale_sequence(kps[p], valid[p])
        ok[0] = False
        i = 1
        while i < n:
            if not ok[i]:
                i += 1
                continue
            j = i
            while j < n and ok[j]:
                j += 1
            if j - i >= min_length:
                sl = slice(i, j)
                kw = ({"flow24": flow[sl]} if flow is not None
                      else {"ego_rot": ego_rot[sl], "ego_trans": ego_trans[sl]})
                tracklets.append(Tracklet(script.video_id, i, kps[p, sl], valid[p, sl],
                                          float(cam.width_px), float(cam.height_px),
                                          script.fps, **kw))
            i = j
    return scene, tracklets


def _avoid_turn(ped_xz, heading, wearer_xz, wearer_yaw, reach=6.0, corridor=1.5, rate=0.8):
    rel = ped_xz - wearer_xz
    ahead = rel[0] * np.sin(wearer_yaw) + rel[1] * np.cos(wearer_yaw)
    lateral = rel[0] * np.cos(wearer_yaw) - rel[1] * np.sin(wearer_yaw)
    if not (0.0 < ahead < reach and abs(lateral) < corridor):
        return 0.0
    side = 1.0 if lateral >= 0 else -1.0
    grow = np.cos(heading - wearer_yaw)   # d(lateral velocity)/d(heading)
    return rate * side * (1.0 if grow >= 0 else -1.0)


# --------------------------------------------------------------------------
# canned suites

def _spawn(rng, cam, depth=(3.0, 14.0), spread=0.8):
    z = rng.uniform(*depth)
    x = rng.uniform(-spread, spread) * cam.half_fov_tan * z
    return (float(x), float(z))


def _linear_script(rng, vid):
    cam = CameraSpec()
    peds = []
    for _ in range(rng.integers(1, 4)):
        z = rng.uniform(4.0, 14.0)
        direction = rng.choice([-1.0, 1.0])
        hw = cam.half_fov_tan * z
        x = -direction * hw * rng.uniform(0.2, 0.9)
        peds.append(PedestrianScript(
            start=(float(x), float(z)), heading=float(direction * np.pi / 2),
            speed=float(rng.uniform(0.5, 1.8)), body_height=float(rng.uniform(1.55, 1.9)),
            gait_freq=float(rng.uniform(1.6, 2.0)), gait_phase=float(rng.uniform(0, 2 * np.pi))))
    return SceneScript(vid, duration_frames=40, pedestrians=peds, camera=cam)


def _mixed_pedestrian(rng, cam, lead=0.5, turns=False, span=4.0):
    kind = rng.choice(["toward", "away", "across", "free"])
    base = {"toward": np.pi, "away": 0.0, "across": rng.choice([-1, 1]) * np.pi / 2,
            "free": rng.uniform(-np.pi, np.pi)}[kind]
    spread = 0.3 if kind == "across" else 0.4
    heading = base + rng.uniform(-spread, spread)
    speed = 0.0 if rng.random() < 0.15 else rng.uniform(0.6, 1.8)
    turn = rng.uniform(-0.5, 0.5) if rng.random() < 0.4 else 0.0
    events = []
    if turns and speed > 0:
        turn = 0.0
        t = rng.uniform(0.0, 1.5)
        while t < span:
            events.append((float(t), float(rng.uniform(0.4, 0.8)),
                           float(rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.4))))
            t += rng.uniform(1.5, 3.0)
    return PedestrianScript(
        start=_spawn(rng, cam), heading=float(heading), speed=float(speed), turn_rate=float(turn),
        body_height=float(rng.uniform(1.55, 1.9)), gait_freq=float(rng.uniform(1.6, 2.0)),
        gait_phase=float(rng.uniform(0, 2 * np.pi)), facing_lead=lead,
        facing=float(heading), turns=events)


def _curved_script(rng, vid):
    # smooth oscillating yaw rate: past camera rotation predicts the next second
    cam = CameraSpec()
    duration = 40
    span = duration / 10.0
    t_knots = np.arange(0.0, span + 1.0, 1.0)
    v0 = rng.uniform(0.8, 1.5)
    speed = [(float(t), float(np.clip(v0 + rng.uniform(-0.2, 0.2), 0.5, 1.8))) for t in t_knots]
    amp, period = rng.uniform(0.2, 0.5), rng.uniform(3.0, 6.0)
    phase, bias = rng.uniform(0, 2 * np.pi), rng.uniform(-0.05, 0.05)
    yk = [(float(t), float(bias + amp * np.sin(2 * np.pi * t / period + phase)))
          for t in np.arange(0.0, span + 0.5, 0.2)]
    # body facing turns ahead of the path
    peds = [_mixed_pedestrian(rng, cam, lead=0.8, turns=True, span=span)
            for _ in range(rng.integers(2, 5))]
    return SceneScript(vid, duration_frames=duration, wearer_speed=speed, wearer_yaw_rate=yk,
                       pedestrians=peds, camera=cam)


def _interactive_script(rng, vid):
    cam = CameraSpec()
    v = rng.uniform(1.0, 1.5)
    w = rng.uniform(-0.05, 0.05)
    peds = []
    for _ in range(rng.integers(2, 4)):
        z = rng.uniform(6.0, 14.0)
        x = rng.uniform(-1.2, 1.2)
        peds.append(PedestrianScript(
            start=(float(x), float(z)), heading=float(np.pi + rng.uniform(-0.2, 0.2)),
            speed=float(rng.uniform(1.0, 1.6)), body_height=float(rng.uniform(1.55, 1.9)),
            gait_freq=float(rng.uniform(1.6, 2.0)), gait_phase=float(rng.uniform(0, 2 * np.pi)),
            facing_lead=0.5, avoid=True))
    if rng.random() < 0.5:
        peds.append(_mixed_pedestrian(rng, cam))
    return SceneScript(vid, duration_frames=40, wearer_speed=[(0.0, float(v))],
                       wearer_yaw_rate=[(0.0, float(w))], pedestrians=peds, camera=cam)


_RECIPES = {"linear": _linear_script, "curved_ego": _curved_script,
            "interactive": _interactive_script}


@dataclass
class Suite:
    name: str
    scenes: list
    tracklets: list
    samples: SampleSet


def generate_suite(name, seed=0, n_samples=2000, t_prev=10, t_future=10,
                   ego_kind="rotation_translation", max_windows_per_tracklet=15):
    """Generate scenes until exactly ``n_samples`` sliding-window samples exist.

    Tracklets are trimmed so that none yields more than
    ``max_windows_per_tracklet`` windows, and the last one is trimmed to hit
    the sample count exactly.
    """
    if name not in _RECIPES:
        raise UsageError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    span = t_prev + t_future
    suite_id = SUITES.index(name)
    scenes, tracklets, samples = [], [], []
    j = 0
    while len(samples) < n_samples:
        rng = np.random.default_rng(np.random.SeedSequence([seed, suite_id, j]))
        script = _RECIPES[name](rng, f"{name}-{seed}-{j:05d}")
        script.seed = int(seed)
        script.ego_kind = ego_kind
        scene, tks = generate_scene(script, min_length=span)
        j += 1
        if j > 100 * n_samples + 100:
            raise RuntimeError("scene generator produces no usable tracklets")
        kept = []
        for tk in tks:
            need = n_samples - len(samples)
            if need <= 0:
                break
            length = min(len(tk), span - 1 + min(need, max_windows_per_tracklet))
            tk = _trim(tk, length)
            got = sliding_window(tk, t_prev, t_future)
            samples.extend(got)
            kept.append(tk)
        if kept:
            scenes.append(scene)
            tracklets.extend(kept)
    return Suite(name, scenes, tracklets, SampleSet.from_samples(samples))


def _trim(tk, length):
    if length >= len(tk):
        return tk
    sl = slice(0, length)
    kw = ({"flow24": tk.flow24[sl]} if tk.flow24 is not None
          else {"ego_rot": tk.ego_rot[sl], "ego_trans": tk.ego_trans[sl]})
    return Tracklet(tk.video_id, tk.start_frame, tk.keypoints[sl], tk.valid[sl], tk.width,
                    tk.height, tk.fps, **kw)


def standard_suites(seed=0, n_samples=2000, **kw):
    """The three canned suites: linear, curved_ego, interactive."""
    return {name: generate_suite(name, seed, n_samples, **kw) for name in SUITES}


# --------------------------------------------------------------------------
# files

def write_suite(suite: Suite, out_dir, stem=None):
    """Write ``<stem>.jsonl`` tracklets and ``<stem>.gt.jsonl`` ground truth."""
    from pathlib import Path

    from .data import write_tracklets

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or suite.name
    write_tracklets(out / f"{stem}.jsonl", suite.tracklets)
    with open(out / f"{stem}.gt.jsonl", "w", encoding="utf-8") as fh:
        for scene in suite.scenes:
            fh.write(json.dumps(scene.to_json(), separators=(",", ":")) + "\n")
    return out / f"{stem}.jsonl", out / f"{stem}.gt.jsonl"


def read_scripts(path):
    """Parse a JSON Lines file of scene scripts; errors carry the line number."""
    scripts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                scripts.append(SceneScript.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError, KeyError, ValueError, UsageError) as exc:
                raise FormatError(f"{path}:{lineno}: invalid scene script: {exc}") from exc
    return scripts
