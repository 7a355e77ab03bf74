"""Tracklets, fixed-window samples, normalization, flips, directions and folds."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import features as ft
from .errors import DegenerateDataError, FormatError, InvalidSampleError, UsageError

DIRECTIONS = ("Toward", "Away", "Across", "Other")
ACROSS_THRESHOLD = 0.25
TOWARD_FRACTION = 0.75
AWAY_FRACTION = 0.25

CACHE_MAGIC = b"EGS1"
CACHE_VERSION = 1


# --------------------------------------------------------------------------
# tracklets

@dataclass
class Tracklet:
    """A contiguous per-person observation sequence with aligned ego-motion.

    ``ego_rot[i]``/``ego_trans[i]`` (or ``flow24[i]``) describe camera motion
    from frame i-1 to frame i.
    """
    video_id: str
    start_frame: int
    keypoints: np.ndarray          # [T, 18, 2] pixels
    valid: np.ndarray              # [T, 18] bool
    width: float = 1280.0
    height: float = 960.0
    fps: float = 10.0
    ego_rot: np.ndarray | None = None     # [T, 3, 3]
    ego_trans: np.ndarray | None = None   # [T, 3]
    flow24: np.ndarray | None = None      # [T, 24]

    def __post_init__(self):
        self.keypoints = ft.quantize(self.keypoints).reshape(-1, ft.NUM_KEYPOINTS, 2)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1, ft.NUM_KEYPOINTS)
        n = len(self.keypoints)
        if len(self.valid) != n:
            raise FormatError(f"tracklet {self.video_id}: keypoint and validity lengths differ")
        if self.flow24 is not None:
            self.flow24 = np.asarray(self.flow24, dtype=np.float64).reshape(n, 24)
        elif self.ego_rot is not None and self.ego_trans is not None:
            self.ego_rot = np.asarray(self.ego_rot, dtype=np.float64).reshape(n, 3, 3)
            self.ego_trans = np.asarray(self.ego_trans, dtype=np.float64).reshape(n, 3)
        else:
            raise FormatError(f"tracklet {self.video_id}: no ego-motion given")

    def __len__(self):
        return len(self.keypoints)

    @property
    def ego_kind(self):
        return "flow_grid" if self.flow24 is not None else "rotation_translation"

    def frame(self, i) -> ft.FrameObservation:
        return ft.FrameObservation(self.start_frame + i, self.keypoints[i], self.valid[i],
                                   self.width, self.height)

    def to_json(self):
        frames = []
        for i in range(len(self)):
            kp = [[float(x), float(y), int(v)] for (x, y), v in zip(self.keypoints[i], self.valid[i])]
            frames.append({"idx": self.start_frame + i, "w": self.width, "h": self.height, "kp": kp})
        if self.flow24 is not None:
            ego = [{"flow24": [float(u) for u in row]} for row in self.flow24]
        else:
            ego = [{"r": [float(u) for u in r.reshape(-1)], "v": [float(u) for u in v]}
                   for r, v in zip(self.ego_rot, self.ego_trans)]
        return {"video_id": self.video_id, "fps": self.fps, "start_frame": self.start_frame,
                "frames": frames, "ego": ego}

    @classmethod
    def from_json(cls, d):
        try:
            frames = d["frames"]
            if not frames:
                raise FormatError("tracklet has no frames")
            idx = [f["idx"] for f in frames]
            if idx != list(range(idx[0], idx[0] + len(idx))):
                raise FormatError("frame indices are not consecutive")
            kp = np.array([[[p[0], p[1]] for p in f["kp"]] for f in frames], dtype=np.float64)
            valid = np.array([[bool(p[2]) for p in f["kp"]] for f in frames])
            if kp.shape[1:] != (ft.NUM_KEYPOINTS, 2):
                raise FormatError(f"expected {ft.NUM_KEYPOINTS} keypoints per frame")
            ego = d["ego"]
            if len(ego) != len(frames):
                raise FormatError("ego and frames have different lengths")
            kwargs = {}
            if "flow24" in ego[0]:
                kwargs["flow24"] = np.array([e["flow24"] for e in ego], dtype=np.float64)
            else:
                kwargs["ego_rot"] = np.array([e["r"] for e in ego], dtype=np.float64)
                kwargs["ego_trans"] = np.array([e["v"] for e in ego], dtype=np.float64)
            return cls(video_id=str(d["video_id"]), start_frame=int(d.get("start_frame", idx[0])),
                       keypoints=kp, valid=valid, width=float(frames[0]["w"]),
                       height=float(frames[0]["h"]), fps=float(d.get("fps", 10.0)), **kwargs)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed tracklet record: {exc}") from exc


def write_tracklets(path, tracklets):
    with open(path, "w", encoding="utf-8") as fh:
        for t in tracklets:
            fh.write(json.dumps(t.to_json(), separators=(",", ":")) + "\n")


def read_tracklets(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Tracklet.from_json(json.loads(line)))
            except (json.JSONDecodeError, FormatError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# samples

@dataclass
class Sample:
    x_in: np.ndarray       # [3, T_prev] absolute (x, y, s)
    e_in: np.ndarray       # [D_e, T_prev]
    p_in: np.ndarray       # [36, T_prev]
    x_out: np.ndarray      # [3, T_future] offsets from the anchor
    anchor: np.ndarray     # [3] location-scale at t0
    video_id: str
    t0: int
    direction: str
    frame_width: float = 1280.0
    frame_height: float = 960.0

    @property
    def ego_kind(self):
        return "flow_grid" if self.e_in.shape[0] == 24 else "rotation_translation"

    def future_absolute(self):
        return self.x_out + self.anchor[:, None]


def _direction_rule(left, right):
    """left/right: normalized hip positions [T, 2]."""
    if len(left) == 0:
        raise InvalidSampleError("no frame with valid hips")
    dist = np.hypot(left[:, 0] - right[:, 0], left[:, 1] - right[:, 1])
    if dist.mean() < ACROSS_THRESHOLD:
        return "Across"
    toward = np.mean(left[:, 0] > right[:, 0])
    if toward > TOWARD_FRACTION:
        return "Toward"
    if toward < AWAY_FRACTION:
        return "Away"
    return "Other"


def categorize_direction(keypoints, valid):
    """Walking direction of a keypoint window [T, 18, 2] / [T, 18].

    Across when the mean scale-normalized hip distance is below 0.25;
    otherwise Toward if more than 75% of frames have the left hip right of
    the right hip in the image, Away if fewer than 25%, else Other.
    """
    xs, ok = ft.location_scale_sequence(keypoints, valid)
    kp = np.asarray(keypoints, dtype=np.float64)[ok]
    xs = xs[ok]
    left = (kp[:, ft.L_HIP] - xs[:, :2]) / xs[:, 2:3]
    right = (kp[:, ft.R_HIP] - xs[:, :2]) / xs[:, 2:3]
    return _direction_rule(left, right)


def direction_from_pose(p_in):
    """Same rule as :func:`categorize_direction`, read from a [36, T] pose block."""
    p = np.asarray(p_in).reshape(ft.NUM_KEYPOINTS, 2, -1)
    return _direction_rule(p[ft.L_HIP].T, p[ft.R_HIP].T)


def build_sample(tracklet: Tracklet, t0: int, t_prev: int, t_future: int, *,
                 ego_order="left", ego_first="consistent") -> Sample:
    """Sample anchored at tracklet index ``t0``: inputs t0-t_prev+1..t0, targets t0+1..t0+t_future."""
    lo, hi = t0 - t_prev + 1, t0 + t_future + 1
    if lo < 0 or hi > len(tracklet):
        raise InvalidSampleError(
            f"window [{lo}, {hi}) does not fit in a tracklet of {len(tracklet)} frames")
    kp, valid = tracklet.keypoints[lo:hi], tracklet.valid[lo:hi]
    xs, ok = ft.location_scale_sequence(kp, valid)
    if not ok.all():
        raise InvalidSampleError("window contains frames without hips/neck")
    return _sample_from_window(tracklet, lo, t_prev, xs, ego_order, ego_first)


def _sample_from_window(tracklet, lo, t_prev, xs, ego_order, ego_first):
    past = slice(lo, lo + t_prev)
    anchor = xs[t_prev - 1].copy()
    x_in = xs[:t_prev].T.copy()
    x_out = (xs[t_prev:] - anchor).T.copy()
    if tracklet.flow24 is not None:
        e_in = tracklet.flow24[past].T.copy()
    else:
        e_in = ft.accumulate_ego(tracklet.ego_rot[past], tracklet.ego_trans[past],
                                 order=ego_order, first_frame=ego_first).T.copy()
    p_in = ft.pose_sequence(tracklet.keypoints[past], tracklet.valid[past], xs[:t_prev]).T.copy()
    return Sample(x_in=x_in, e_in=e_in, p_in=p_in, x_out=x_out, anchor=anchor,
                  video_id=tracklet.video_id, t0=tracklet.start_frame + lo + t_prev - 1,
                  direction=direction_from_pose(p_in), frame_width=tracklet.width,
                  frame_height=tracklet.height)


def sliding_window(tracklet: Tracklet, t_prev=10, t_future=10, stride=1, **kw):
    """Every fully valid window of t_prev + t_future frames, stepping by ``stride``."""
    span = t_prev + t_future
    if len(tracklet) < span:
        return []
    xs, ok = ft.location_scale_sequence(tracklet.keypoints, tracklet.valid)
    bad = np.concatenate([[0], np.cumsum(~ok)])
    out = []
    for lo in range(0, len(tracklet) - span + 1, stride):
        if bad[lo + span] - bad[lo]:
            continue
        out.append(_sample_from_window(tracklet, lo, t_prev, xs[lo:lo + span],
                                       kw.get("ego_order", "left"), kw.get("ego_first", "consistent")))
    return out


# --------------------------------------------------------------------------
# horizontal flip

def _flip_arrays(x_in, e_in, p_in, x_out, width):
    """Mirror stacked arrays [..., C, T] about x = width / 2. Returns new arrays."""
    x_in = x_in.copy()
    x_in[..., 0, :] = np.asarray(width)[..., None] - x_in[..., 0, :]
    x_out = x_out.copy()
    x_out[..., 0, :] = -x_out[..., 0, :]
    lead = p_in.shape[:-2]
    p = p_in.reshape(*lead, ft.NUM_KEYPOINTS, 2, -1)[..., ft.MIRROR_INDEX, :, :].copy()
    p[..., 0, :] = -p[..., 0, :]
    p_in = p.reshape(p_in.shape)
    e_in = e_in.copy()
    if e_in.shape[-2] == 6:
        e_in[..., [0, 1, 3], :] = -e_in[..., [0, 1, 3], :]
    else:
        g = e_in.reshape(*lead, ft.GRID_ROWS, ft.GRID_COLS, 2, -1)[..., ::-1, :, :].copy()
        g[..., 0, :] = -g[..., 0, :]
        e_in = g.reshape(e_in.shape)
    return x_in, e_in, p_in, x_out


def hflip(sample: Sample, frame_width=None) -> Sample:
    """Mirror a sample left-right.

    Location x -> W - x, offsets dx -> -dx, pose x negated with left/right
    parts swapped, ego yaw/roll/x-translation negated (flow: u negated and
    grid columns mirrored). The direction label is recomputed.
    """
    w = sample.frame_width if frame_width is None else frame_width
    x_in, e_in, p_in, x_out = _flip_arrays(sample.x_in, sample.e_in, sample.p_in, sample.x_out, w)
    anchor = sample.anchor.copy()
    anchor[0] = w - anchor[0]
    return replace(sample, x_in=x_in, e_in=e_in, p_in=p_in, x_out=x_out, anchor=anchor,
                   direction=direction_from_pose(p_in))


# --------------------------------------------------------------------------
# normalization

@dataclass
class NormStats:
    """Per-channel mean/std for the location-scale input and the offset target.

    Inputs (absolute positions) and targets (offsets) live on very different
    scales, so each gets its own zero-mean, unit-variance transform.
    """
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def normalize_in(self, x):
        return (x - self.in_mean[:, None]) / self.in_std[:, None]

    def denormalize_in(self, x):
        return x * self.in_std[:, None] + self.in_mean[:, None]

    def normalize_out(self, x):
        return (x - self.out_mean[:, None]) / self.out_std[:, None]

    def denormalize_out(self, x):
        return x * self.out_std[:, None] + self.out_mean[:, None]

    def to_dict(self):
        return {k: [float(v) for v in getattr(self, k)]
                for k in ("in_mean", "in_std", "out_mean", "out_std")}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**{k: np.array(d[k], dtype=np.float64)
                          for k in ("in_mean", "in_std", "out_mean", "out_std")})
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad normalization statistics: {exc}") from exc


def _channel_stats(a, what):
    # a: [S, 3, T]
    flat = a.transpose(1, 0, 2).reshape(a.shape[1], -1)
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    if np.any(~(std > 0)):
        raise DegenerateDataError(f"{what} has a zero-variance channel")
    return mean, std


def compute_norm_stats(x_in, x_out=None) -> NormStats:
    """Stats over all samples and time steps. Accepts a SampleSet or two arrays."""
    if x_out is None:
        x_in, x_out = x_in.x_in, x_in.x_out
    if len(x_in) < 2:
        raise DegenerateDataError("need at least two samples for normalization statistics")
    in_mean, in_std = _channel_stats(np.asarray(x_in), "X_in")
    out_mean, out_std = _channel_stats(np.asarray(x_out), "X_out")
    return NormStats(in_mean, in_std, out_mean, out_std)


# --------------------------------------------------------------------------
# stacked sample sets

@dataclass
class SampleSet:
    x_in: np.ndarray
    e_in: np.ndarray
    p_in: np.ndarray
    x_out: np.ndarray
    anchors: np.ndarray
    video_ids: list
    t0s: np.ndarray
    directions: list
    widths: np.ndarray
    heights: np.ndarray
    norm: NormStats | None = None
    folds: dict | None = field(default=None)

    def __len__(self):
        return len(self.x_in)

    @property
    def t_prev(self):
        return self.x_in.shape[2]

    @property
    def t_future(self):
        return self.x_out.shape[2]

    @property
    def ego_kind(self):
        return "flow_grid" if self.e_in.shape[1] == 24 else "rotation_translation"

    @classmethod
    def from_samples(cls, samples, norm=None):
        if not samples:
            raise UsageError("no samples")
        return cls(
            x_in=np.stack([s.x_in for s in samples]),
            e_in=np.stack([s.e_in for s in samples]),
            p_in=np.stack([s.p_in for s in samples]),
            x_out=np.stack([s.x_out for s in samples]),
            anchors=np.stack([s.anchor for s in samples]),
            video_ids=[s.video_id for s in samples],
            t0s=np.array([s.t0 for s in samples], dtype=np.int64),
            directions=[s.direction for s in samples],
            widths=np.array([s.frame_width for s in samples]),
            heights=np.array([s.frame_height for s in samples]),
            norm=norm,
        )

    def __getitem__(self, i) -> Sample:
        return Sample(self.x_in[i], self.e_in[i], self.p_in[i], self.x_out[i], self.anchors[i],
                      self.video_ids[i], int(self.t0s[i]), self.directions[i],
                      float(self.widths[i]), float(self.heights[i]))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(self.x_in[idx], self.e_in[idx], self.p_in[idx], self.x_out[idx],
                         self.anchors[idx], [self.video_ids[i] for i in idx], self.t0s[idx],
                         [self.directions[i] for i in idx], self.widths[idx], self.heights[idx],
                         self.norm, self.folds)

    def fold_indices(self, fold):
        """(train_idx, test_idx) for the given test fold."""
        if self.folds is None:
            raise UsageError("sample set has no fold assignment")
        k = max(self.folds.values()) + 1
        if not 0 <= fold < k:
            raise UsageError(f"fold {fold} out of range 0..{k - 1}")
        f = np.array([self.folds[v] for v in self.video_ids])
        return np.flatnonzero(f != fold), np.flatnonzero(f == fold)


def batch_arrays(dataset: SampleSet, idx, flips=None):
    """Network-ready arrays for ``idx``; ``flips`` marks samples to mirror first."""
    idx = np.asarray(idx)
    x_in, e_in = dataset.x_in[idx], dataset.e_in[idx]
    p_in, x_out = dataset.p_in[idx], dataset.x_out[idx]
    if flips is not None and np.any(flips):
        f = np.flatnonzero(flips)
        x_in, e_in, p_in, x_out = x_in.copy(), e_in.copy(), p_in.copy(), x_out.copy()
        x_in[f], e_in[f], p_in[f], x_out[f] = _flip_arrays(
            x_in[f], e_in[f], p_in[f], x_out[f], dataset.widths[idx][f])
    norm = dataset.norm
    return (np.ascontiguousarray(norm.normalize_in(x_in)), np.ascontiguousarray(e_in),
            np.ascontiguousarray(p_in), np.ascontiguousarray(norm.normalize_out(x_out)))


# --------------------------------------------------------------------------
# folds

@dataclass
class FoldSplit:
    assignment: dict   # video_id -> fold
    k: int

    def test_videos(self, fold):
        return sorted(v for v, f in self.assignment.items() if f == fold)

    def train_videos(self, fold):
        return sorted(v for v, f in self.assignment.items() if f != fold)


def kfold_split(videos, k=5, seed=0) -> FoldSplit:
    """Assign whole videos to k folds, balancing sample counts.

    ``videos`` is a mapping video_id -> sample count, or an iterable of
    per-sample video ids. Videos are shuffled with ``seed``, then placed
    largest-first into the currently lightest fold.
    """
    if isinstance(videos, dict):
        counts = dict(videos)
    else:
        counts = {}
        for v in videos:
            counts[v] = counts.get(v, 0) + 1
    if len(counts) < k:
        raise UsageError(f"{len(counts)} videos cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    names = sorted(counts)
    names = [names[i] for i in rng.permutation(len(names))]
    names.sort(key=lambda v: -counts[v])
    totals = [0] * k
    members = [0] * k
    assignment = {}
    for v in names:
        f = min(range(k), key=lambda j: (totals[j], members[j], j))
        assignment[v] = f
        totals[f] += counts[v]
        members[f] += 1
    return FoldSplit(assignment, k)


# --------------------------------------------------------------------------
# sample cache

def _pack(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_sample_cache(path, ss: SampleSet):
    header = {
        "ego_kind": ss.ego_kind, "count": len(ss), "t_prev": ss.t_prev, "t_future": ss.t_future,
        "e_dim": int(ss.e_in.shape[1]), "video_ids": list(ss.video_ids),
        "t0s": [int(t) for t in ss.t0s], "directions": list(ss.directions),
        "widths": [float(w) for w in ss.widths], "heights": [float(h) for h in ss.heights],
        "folds": ss.folds,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<II", CACHE_VERSION, len(raw)))
    buf.write(raw)
    for arr in (ss.x_in, ss.e_in, ss.p_in, ss.x_out, ss.anchors):
        _pack(buf, arr)
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def load_sample_cache(path) -> SampleSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 44 or raw[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a sample cache (bad magic)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: sample cache is truncated or corrupted")
    version, hlen = struct.unpack("<II", body[4:12])
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    h = json.loads(body[12:12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    n, tp, tf, de = h["count"], h["t_prev"], h["t_future"], h["e_dim"]
    arrays = []
    for shape in ((n, 3, tp), (n, de, tp), (n, 36, tp), (n, 3, tf), (n, 3)):
        size = int(np.prod(shape)) * 8
        if pos + size > len(body):
            raise FormatError(f"{path}: sample cache is truncated")
        arrays.append(np.frombuffer(body[pos:pos + size], dtype="<f8").astype(np.float64).reshape(shape))
        pos += size
    return SampleSet(*arrays, video_ids=h["video_ids"], t0s=np.array(h["t0s"], dtype=np.int64),
                     directions=h["directions"], widths=np.array(h["widths"]),
                     heights=np.array(h["heights"]), folds=h["folds"])
