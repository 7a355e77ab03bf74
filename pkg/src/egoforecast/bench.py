"""Baselines, final displacement error and evaluation reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .data import DIRECTIONS, SampleSet
from .errors import UsageError

HIST_EDGES = (0.0, 50.0, 100.0, 150.0, 200.0, 250.0, 300.0, float("inf"))
# assumed physical neck-to-mid-hip length
BODY_SCALE_CM = 60.0


@dataclass
class Prediction:
    final_location: np.ndarray          # [2] pixels
    offsets: np.ndarray | None = None   # [3, T_future]


def fde(pred, gt) -> float:
    """Euclidean distance between two image points."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return float(np.hypot(d[0], d[1]))


def scale_normalized_error(fde_px, scale_px):
    """Pixel error converted to centimetres, taking the person's scale as 60 cm."""
    s = np.asarray(scale_px, dtype=np.float64)
    if np.any(~(s > 0)):
        raise UsageError("scale must be positive")
    return np.asarray(fde_px, dtype=np.float64) / s * BODY_SCALE_CM


def gt_final_locations(samples: SampleSet):
    return samples.anchors[:, :2] + samples.x_out[:, :2, -1]


def const_vel(sample, t_future=None) -> Prediction:
    """Extrapolate the mean per-frame displacement of the observed locations."""
    x_in = np.asarray(sample.x_in)
    if x_in.shape[1] < 2:
        raise UsageError("constant velocity needs at least two observed frames")
    tf = sample.x_out.shape[1] if t_future is None else t_future
    vel = (x_in[:, -1] - x_in[:, 0]) / (x_in.shape[1] - 1)
    steps = np.arange(1, tf + 1)
    offsets = vel[:, None] * steps[None, :]
    return Prediction(x_in[:2, -1] + offsets[:2, -1], offsets)


def const_vel_batch(samples: SampleSet):
    """Vectorized :func:`const_vel`; returns predicted final locations [S, 2]."""
    x = samples.x_in
    if x.shape[2] < 2:
        raise UsageError("constant velocity needs at least two observed frames")
    vel = (x[:, :2, -1] - x[:, :2, 0]) / (x.shape[2] - 1)
    return x[:, :2, -1] + samples.t_future * vel


class NNeighbor:
    """k-nearest-neighbour retrieval over observed location sequences.

    With ``relative=True`` (default) each sequence is expressed relative to
    its own last location and the neighbours' final offsets are averaged and
    added to the query's anchor; with ``relative=False`` absolute sequences
    are matched and absolute final locations averaged. Ties are broken by
    index order.
    """

    def __init__(self, train: SampleSet, k=16, relative=True):
        if len(train) == 0:
            raise UsageError("nearest-neighbour index is empty")
        self.k = min(k, len(train))
        self.relative = relative
        self.keys = self._keys(train.x_in)
        if relative:
            self.values = train.x_out[:, :2, -1].copy()
        else:
            self.values = gt_final_locations(train)

    def _keys(self, x_in):
        loc = x_in[:, :2, :]
        if self.relative:
            loc = loc - loc[:, :, -1:]
        return loc.reshape(len(x_in), -1)

    def predict_batch(self, samples: SampleSet, chunk=512):
        q = self._keys(samples.x_in)
        out = np.empty((len(q), 2))
        kn = (self.keys * self.keys).sum(axis=1)
        for s in range(0, len(q), chunk):
            qc = q[s:s + chunk]
            d = (qc * qc).sum(axis=1)[:, None] - 2.0 * qc @ self.keys.T + kn[None, :]
            # exact distances for the candidate set keep ties and zeros exact
            cand = np.argsort(d, axis=1, kind="stable")[:, :self.k + 8]
            for r, row in enumerate(cand):
                exact = ((self.keys[row] - qc[r]) ** 2).sum(axis=1)
                order = np.lexsort((row, exact))[:self.k]
                out[s + r] = self.values[row[order]].mean(axis=0)
        if self.relative:
            out += samples.x_in[:, :2, -1]
        return out

    def predict(self, sample) -> Prediction:
        ss = SampleSet(np.asarray(sample.x_in)[None], np.asarray(sample.e_in)[None],
                       np.asarray(sample.p_in)[None], np.asarray(sample.x_out)[None],
                       np.asarray(sample.anchor)[None], [sample.video_id],
                       np.array([sample.t0]), [sample.direction],
                       np.array([sample.frame_width]), np.array([sample.frame_height]))
        return Prediction(self.predict_batch(ss)[0])


def nneighbor(sample, train_index: NNeighbor) -> Prediction:
    return train_index.predict(sample)


@dataclass
class EvalReport:
    method: str
    per_direction: dict        # name -> mean FDE or None, plus "Average"
    counts: dict
    histogram_edges: tuple
    histogram: list
    frac_below_100: float
    frac_above_300: float
    mean_physical_error_cm: float
    per_sample_fde: list

    @property
    def average(self):
        return self.per_direction["Average"]

    def to_dict(self):
        return {
            "method": self.method,
            "fde": self.per_direction,
            "counts": self.counts,
            "histogram": {"edges": [e if np.isfinite(e) else "inf" for e in self.histogram_edges],
                          "counts": self.histogram},
            "frac_below_100px": self.frac_below_100,
            "frac_above_300px": self.frac_above_300,
            "mean_physical_error_cm": self.mean_physical_error_cm,
            "per_sample_fde": self.per_sample_fde,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = list(DIRECTIONS) + ["Average"]
        w.writerow(["Method"] + cols)
        w.writerow([self.method] + ["" if self.per_direction[c] is None else f"{self.per_direction[c]:.2f}"
                                    for c in cols])
        return buf.getvalue()


def evaluate(pred_final, samples: SampleSet, method="model") -> EvalReport:
    """Aggregate FDE by walking direction. ``pred_final`` is [S, 2] pixels."""
    pred_final = np.asarray(pred_final, dtype=np.float64)
    if len(pred_final) != len(samples):
        raise UsageError(f"{len(pred_final)} predictions for {len(samples)} samples")
    if len(samples) == 0:
        raise UsageError("nothing to evaluate")
    gt = gt_final_locations(samples)
    d = pred_final[:, :2] - gt
    err = np.hypot(d[:, 0], d[:, 1])
    dirs = np.array(samples.directions)
    per, counts = {}, {}
    for name in DIRECTIONS:
        m = dirs == name
        counts[name] = int(m.sum())
        per[name] = float(err[m].mean()) if m.any() else None
    per["Average"] = float(err.mean())
    counts["Average"] = len(err)
    hist, _ = np.histogram(err, bins=np.array(HIST_EDGES))
    phys = scale_normalized_error(err, samples.anchors[:, 2])
    return EvalReport(
        method=method, per_direction=per, counts=counts, histogram_edges=HIST_EDGES,
        histogram=[int(h) for h in hist], frac_below_100=float(np.mean(err < 100.0)),
        frac_above_300=float(np.mean(err > 300.0)),
        mean_physical_error_cm=float(phys.mean()), per_sample_fde=[float(e) for e in err])


def overlay_svg(sample, predicted_offsets=None, width=None, height=None):
    """Static SVG: observed path (blue), ground truth (red), prediction (green)."""
    w = sample.frame_width if width is None else width
    h = sample.frame_height if height is None else height
    past = np.asarray(sample.x_in)[:2].T
    anchor = np.asarray(sample.anchor)[:2]
    future = np.vstack([anchor, (np.asarray(sample.x_out)[:2] + anchor[:, None]).T])

    def poly(pts, color):
        s = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
        return f'<polyline points="{s}" fill="none" stroke="{color}" stroke-width="3"/>'

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:g}" height="{h:g}" '
             f'viewBox="0 0 {w:g} {h:g}">',
             f'<rect width="{w:g}" height="{h:g}" fill="white" stroke="black"/>',
             poly(past, "blue"), poly(future, "red")]
    if predicted_offsets is not None:
        pred = np.vstack([anchor, (np.asarray(predicted_offsets)[:2] + anchor[:, None]).T])
        parts.append(poly(pred, "green"))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
