"""egoforecast command line: synth, prepare, train, eval, predict, selftest.

Exit codes: 0 success, 1 usage or config error, 2 data or format error,
3 selftest failure.

Run configuration is a JSON object; every command-line flag overrides the
corresponding key. Recognised keys (all optional):

    t_prev, t_future          int, observation/prediction horizons (10, 10)
    streams                   list of "ls", "ego", "pose" (all three)
    ego_kind                  "rotation_translation" | "flow_grid" (from data)
    schedule                  "desk" (2,000 iterations) | "paper" (full
                              17,000-iteration schedule); default desk
    iterations, batch_size    int, override the schedule preset
    learning_rate             float
    decay_points              list of int, strictly increasing, < iterations
    decay_factor              float
    hflip                     bool, mirror augmentation during training
    seed                      int (flag, then EGOFORECAST_SEED, then 0)
    folds                     int, cross-validation folds (5)
    dataset, weights, reports paths

When ``iterations`` is overridden but ``decay_points`` is not, the preset's
decay points are rescaled to the new length.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import bench, data, model, synthgen
from .errors import (ConfigError, DegenerateDataError, DimensionError, EgoForecastError,
                     FormatError, InvalidObservationError, InvalidSampleError, UsageError,
                     ValidationError)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SELFTEST = 0, 1, 2, 3
SEED_ENV = "EGOFORECAST_SEED"
FAULT_ENV = "EGOFORECAST_SELFTEST_FAULT"

STREAM_ALIASES = {"ls": "location_scale", "location_scale": "location_scale",
                  "ego": "ego_motion", "ego_motion": "ego_motion", "pose": "pose"}
SCHEDULES = {"desk": model.TrainSchedule.desk, "paper": model.TrainSchedule.full}


@dataclass
class RunConfig:
    t_prev: int = 10
    t_future: int = 10
    streams: list = field(default_factory=lambda: ["ls", "ego", "pose"])
    ego_kind: str | None = None
    schedule: str = "desk"
    iterations: int | None = None
    batch_size: int | None = None
    learning_rate: float | None = None
    decay_points: list | None = None
    decay_factor: float | None = None
    hflip: bool | None = None
    seed: int | None = None
    folds: int = 5
    dataset: str | None = None
    weights: str | None = None
    reports: str | None = None

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {sorted(SCHEDULES)}, got {self.schedule!r}")
        if not self.streams:
            raise ConfigError("at least one stream must be enabled")
        for s in self.streams:
            if s not in STREAM_ALIASES:
                raise ConfigError(f"unknown stream {s!r}; use ls, ego, pose")
        if self.ego_kind not in (None, "rotation_translation", "flow_grid"):
            raise ConfigError(f"unknown ego_kind {self.ego_kind!r}")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        self.train_schedule()

    def stream_kinds(self):
        return tuple(dict.fromkeys(STREAM_ALIASES[s] for s in self.streams))

    def seed_value(self):
        if self.seed is not None:
            return int(self.seed)
        env = os.environ.get(SEED_ENV)
        if env is None or env == "":
            return 0
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None

    def train_schedule(self) -> model.TrainSchedule:
        base = SCHEDULES[self.schedule]()
        iters = base.iterations if self.iterations is None else int(self.iterations)
        if self.decay_points is not None:
            points = tuple(int(p) for p in self.decay_points)
        elif iters != base.iterations:
            scaled = [int(p * iters / base.iterations) for p in base.decay_points]
            points = tuple(sorted({p for p in scaled if 0 < p < iters}))
        else:
            points = base.decay_points
        return model.TrainSchedule(
            iterations=iters,
            batch_size=base.batch_size if self.batch_size is None else int(self.batch_size),
            learning_rate=base.learning_rate if self.learning_rate is None else float(self.learning_rate),
            decay_points=points,
            decay_factor=base.decay_factor if self.decay_factor is None else float(self.decay_factor),
            hflip=base.hflip if self.hflip is None else bool(self.hflip))

    def net_config(self, ego_kind) -> model.NetConfig:
        if self.ego_kind is not None and ego_kind is not None and self.ego_kind != ego_kind:
            raise FormatError(f"config expects {self.ego_kind} ego features, data has {ego_kind}")
        kind = ego_kind or self.ego_kind or "rotation_translation"
        ego_dim = 24 if kind == "flow_grid" else 6
        return model.NetConfig(
            t_prev=self.t_prev, t_future=self.t_future,
            streams=model.default_streams(ego_dim=ego_dim, enabled=self.stream_kinds()),
            input_paddings=(1, 1, 0, 0) if self.t_prev == 6 else (0, 0, 0, 0),
            deconv_kernels=(3, 5, 7, 7) if self.t_future == 20 else (3, 3, 3, 3))

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# argument handling

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_flags(p, with_schedule=False):
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--streams", help="comma-separated subset of ls,ego,pose")
    p.add_argument("--t-prev", type=int, dest="t_prev")
    p.add_argument("--t-future", type=int, dest="t_future")
    p.add_argument("--ego-kind", choices=["rotation_translation", "flow_grid"], dest="ego_kind")
    p.add_argument("--seed", type=int, help=f"random seed (falls back to ${SEED_ENV})")
    if with_schedule:
        p.add_argument("--schedule", choices=sorted(SCHEDULES))
        p.add_argument("--iterations", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--learning-rate", type=float, dest="learning_rate")
        p.add_argument("--decay-points", dest="decay_points", help="comma-separated iterations")
        p.add_argument("--decay-factor", type=float, dest="decay_factor")
        p.add_argument("--no-hflip", action="store_false", dest="hflip", default=None)


def build_parser():
    parser = _Parser(prog="egoforecast", description="Future-location forecasting in first-person video.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate synthetic tracklets")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--suite", help=f"canned suite: {', '.join(synthgen.SUITES)}, or 'all'")
    src.add_argument("--script", help="JSON Lines file of scene scripts")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--samples", type=int, default=2000, help="samples per suite (default 2000)")
    p.add_argument("--ego-kind", choices=["rotation_translation", "flow_grid"],
                   default="rotation_translation", dest="ego_kind")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("prepare", help="turn tracklets into a sample cache with fold assignment")
    p.add_argument("--tracklets", required=True, nargs="+", help="tracklet JSON Lines file(s)")
    p.add_argument("-o", "--out", required=True, help="sample cache path")
    p.add_argument("--t-prev", type=int, dest="t_prev")
    p.add_argument("--t-future", type=int, dest="t_future")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--folds", type=int)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train on all folds but one")
    p.add_argument("--data", help="sample cache")
    p.add_argument("--fold", default="0", help="held-out fold index, or 'all' to use every sample")
    p.add_argument("-o", "--out", help="output directory")
    _add_run_flags(p, with_schedule=True)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a model or baseline on a test fold")
    p.add_argument("--data", help="sample cache")
    p.add_argument("--fold", default="0", help="test fold index, or 'all'")
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--weights", help="EGF1 weights file written by train")
    who.add_argument("--baseline", choices=["constvel", "nneighbor"])
    p.add_argument("--index-data", dest="index_data",
                   help="nneighbor index cache when --fold all (defaults to the training folds)")
    p.add_argument("--k", type=int, default=16, help="nneighbor neighbours")
    p.add_argument("--absolute", action="store_true", help="nneighbor on absolute locations")
    p.add_argument("-o", "--out", help="report directory")
    p.add_argument("--label", help="method name in the report")
    p.add_argument("--svg", type=int, default=0, help="write overlays for the first N samples")
    _add_run_flags(p)

    p = sub.add_parser("predict", help="forecast one sample")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("-o", "--out", help="write JSON here instead of stdout")
    p.add_argument("--svg", help="also write an overlay SVG")
    _add_run_flags(p)

    p = sub.add_parser("selftest", help="shape, gradient and ego-motion checks")
    p.add_argument("--instances", type=int, default=3, help="random instances per layer")
    p.add_argument("--network-instances", type=int, default=1, dest="network_instances")
    p.add_argument("--inject-fault", dest="inject_fault", help=argparse.SUPPRESS)
    return parser


def _load_config(args, keys):
    cfg = {}
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    for k in keys:
        v = getattr(args, k, None)
        if v is None:
            continue
        if k == "streams":
            v = [s.strip() for s in v.split(",") if s.strip()]
        elif k == "decay_points":
            try:
                v = [int(s) for s in v.split(",") if s.strip()]
            except ValueError:
                raise ConfigError(f"bad --decay-points {v!r}") from None
        cfg[k] = v
    return RunConfig.from_dict(cfg)


RUN_KEYS = ("streams", "t_prev", "t_future", "ego_kind", "seed", "schedule", "iterations",
            "batch_size", "learning_rate", "decay_points", "decay_factor", "hflip", "folds")


def _parse_fold(text):
    if text == "all":
        return None
    try:
        return int(text)
    except ValueError:
        raise UsageError(f"--fold must be an integer or 'all', got {text!r}") from None


def _require_file(path, what):
    if not path:
        raise UsageError(f"{what} path is required")
    if not Path(path).is_file():
        raise FormatError(f"{what} not found: {path}")
    return path


def _split(ss, fold):
    if fold is None:
        idx = np.arange(len(ss))
        return idx, idx
    return ss.fold_indices(fold)


def _sidecars(weights):
    w = Path(weights)
    stem = w.with_suffix("")
    return {"norm": Path(f"{stem}.norm.json"), "run": Path(f"{stem}.run.json"),
            "loss": Path(f"{stem}.loss.csv")}


def _write_bytes(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# --------------------------------------------------------------------------
# commands

def cmd_synth(args):
    cfg = RunConfig(seed=args.seed)
    seed = cfg.seed_value()
    out = Path(args.out)
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    if args.script:
        scripts = synthgen.read_scripts(_require_file(args.script, "script file"))
        scenes, tracklets = [], []
        for s in scripts:
            s.ego_kind = args.ego_kind if s.ego_kind == "rotation_translation" else s.ego_kind
            scene, tks = synthgen.generate_scene(s)
            scenes.append(scene)
            tracklets.extend(tks)
        if not tracklets:
            raise DegenerateDataError("scripts produced no tracklets")
        samples = [w for tk in tracklets for w in data.sliding_window(tk)]
        suite = synthgen.Suite(Path(args.script).stem, scenes, tracklets,
                               data.SampleSet.from_samples(samples) if samples else None)
        suites = [suite]
    else:
        names = synthgen.SUITES if args.suite == "all" else [args.suite]
        for n in names:
            if n not in synthgen.SUITES:
                raise UsageError(f"unknown suite {n!r}; choose from {', '.join(synthgen.SUITES)}, all")
        suites = [synthgen.generate_suite(n, seed=seed, n_samples=args.samples, ego_kind=args.ego_kind)
                  for n in names]
    for suite in suites:
        tk_path, gt_path = synthgen.write_suite(suite, out)
        n = 0 if suite.samples is None else len(suite.samples)
        print(f"{suite.name}: {len(suite.tracklets)} tracklets, {n} samples -> {tk_path}, {gt_path}")
    return EXIT_OK


def cmd_prepare(args):
    cfg = _load_config(args, ("t_prev", "t_future", "folds", "seed"))
    if args.stride < 1:
        raise UsageError("--stride must be positive")
    tracklets = []
    for path in args.tracklets:
        tracklets.extend(data.read_tracklets(_require_file(path, "tracklet file")))
    samples = []
    for tk in tracklets:
        samples.extend(data.sliding_window(tk, cfg.t_prev, cfg.t_future, args.stride))
    if not samples:
        raise DegenerateDataError(
            f"no tracklet is long enough for {cfg.t_prev}+{cfg.t_future} frame windows")
    ss = data.SampleSet.from_samples(samples)
    split = data.kfold_split(ss.video_ids, cfg.folds, seed=cfg.seed_value())
    ss.folds = split.assignment
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    data.save_sample_cache(args.out, ss)
    per_fold = np.bincount([split.assignment[v] for v in ss.video_ids], minlength=split.k)
    print(f"{len(ss)} samples from {len(tracklets)} tracklets, {len(split.assignment)} videos; "
          f"fold sizes {per_fold.tolist()} -> {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args, RUN_KEYS)
    data_path = _require_file(args.data or cfg.dataset, "dataset")
    out = Path(args.out or cfg.weights or "run")
    fold = _parse_fold(args.fold)
    schedule = cfg.train_schedule()
    ss = data.load_sample_cache(data_path)
    if (ss.t_prev, ss.t_future) != (cfg.t_prev, cfg.t_future):
        raise FormatError(f"dataset has T_prev={ss.t_prev}, T_future={ss.t_future}; "
                          f"config asks for {cfg.t_prev}, {cfg.t_future}")
    train_idx, _ = _split(ss, fold)
    train_set = ss.subset(train_idx)
    train_set.norm = data.compute_norm_stats(train_set)
    net_cfg = cfg.net_config(ss.ego_kind)
    seed = cfg.seed_value()
    net = model.build_network(net_cfg, seed=seed)

    started = time.perf_counter()

    def progress(it, loss):
        if not args.quiet and (it + 1) % max(1, schedule.iterations // 20) == 0:
            print(f"iter {it + 1:>6}/{schedule.iterations}  loss {loss:.5f}  "
                  f"{time.perf_counter() - started:.0f}s", file=sys.stderr)

    log = model.train(net, train_set, schedule, seed=seed, progress=progress)
    out.mkdir(parents=True, exist_ok=True)
    weights = out / "model.egf"
    side = _sidecars(weights)
    model.save_weights(net, weights)
    _write_bytes(side["norm"], json.dumps(train_set.norm.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_bytes(side["loss"], log.to_csv())
    resolved = cfg.to_dict()
    resolved.update(seed=seed, ego_kind=ss.ego_kind, dataset=str(data_path), weights=str(weights))
    resolved.update({k: v for k, v in asdict(schedule).items() if k != "hflip"},
                    decay_points=list(schedule.decay_points), hflip=schedule.hflip)
    _write_bytes(side["run"], json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    print(f"trained {net.parameter_count()} parameters on {len(train_set)} samples "
          f"({schedule.iterations} iterations, final loss {log.losses[-1]:.5f}) -> {weights}")
    return EXIT_OK


def _model_for(args, weights, ego_kind):
    side = _sidecars(weights)
    base = {}
    if not args.config and side["run"].is_file():
        with open(side["run"], encoding="utf-8") as fh:
            saved = json.load(fh)
        base = {k: saved[k] for k in ("t_prev", "t_future", "streams", "ego_kind") if k in saved}
    cfg = _load_config(args, RUN_KEYS)
    for k, v in base.items():
        if getattr(args, k, None) is None:
            setattr(cfg, k, v)
    cfg.validate()
    if not side["norm"].is_file():
        raise FormatError(f"normalization sidecar not found: {side['norm']}")
    with open(side["norm"], encoding="utf-8") as fh:
        try:
            norm = data.NormStats.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{side['norm']}: {exc}") from None
    net = model.load_weights(weights, cfg.net_config(ego_kind))
    return net, norm


def cmd_eval(args):
    cfg = _load_config(args, RUN_KEYS)
    data_path = _require_file(args.data or cfg.dataset, "dataset")
    fold = _parse_fold(args.fold)
    ss = data.load_sample_cache(data_path)
    train_idx, test_idx = _split(ss, fold)
    test = ss.subset(test_idx)
    if len(test) == 0:
        raise DegenerateDataError(f"fold {fold} has no samples")
    offsets = None
    if args.baseline == "constvel":
        final = bench.const_vel_batch(test)
        label = "ConstVel"
    elif args.baseline == "nneighbor":
        if fold is None:
            if not args.index_data:
                raise UsageError("--fold all with nneighbor needs --index-data")
            index = data.load_sample_cache(_require_file(args.index_data, "index dataset"))
        else:
            index = ss.subset(train_idx)
        final = bench.NNeighbor(index, k=args.k, relative=not args.absolute).predict_batch(test)
        label = "NNeighbor"
    else:
        weights = _require_file(args.weights, "weights file")
        net, norm = _model_for(args, weights, ss.ego_kind)
        test.norm = norm
        offsets = model.predict_offsets(net, test)
        final = test.anchors[:, :2] + offsets[:, :2, -1]
        label = Path(weights).stem
    report = bench.evaluate(final, test, method=args.label or label)
    out = Path(args.out or cfg.reports or "reports")
    _write_bytes(out / "report.json", report.to_json())
    _write_bytes(out / "report.csv", report.to_csv())
    for i in range(min(args.svg, len(test))):
        pred = offsets[i] if offsets is not None else None
        if pred is None:
            pred = np.zeros((3, test.t_future))
            pred[:2, -1] = final[i] - test.anchors[i, :2]
        _write_bytes(out / f"overlay_{i:04d}.svg", bench.overlay_svg(test[i], pred))
    print(report.to_csv(), end="")
    print(f"<100px {report.frac_below_100:.3f}  >300px {report.frac_above_300:.3f}  "
          f"physical {report.mean_physical_error_cm:.1f} cm -> {out}")
    return EXIT_OK


def cmd_predict(args):
    ss = data.load_sample_cache(_require_file(args.data, "dataset"))
    if not 0 <= args.index < len(ss):
        raise UsageError(f"--index {args.index} out of range 0..{len(ss) - 1}")
    weights = _require_file(args.weights, "weights file")
    net, norm = _model_for(args, weights, ss.ego_kind)
    one = ss.subset([args.index])
    one.norm = norm
    offsets = model.predict_offsets(net, one)[0]
    sample = one[0]
    final = sample.anchor[:2] + offsets[:2, -1]
    gt = sample.anchor[:2] + sample.x_out[:2, -1]
    result = {
        "video_id": sample.video_id, "t0": sample.t0, "direction": sample.direction,
        "anchor": [float(v) for v in sample.anchor],
        "predicted_offsets": [[float(v) for v in row] for row in offsets],
        "predicted_final": [float(v) for v in final],
        "ground_truth_final": [float(v) for v in gt],
        "fde_px": bench.fde(final, gt),
    }
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_bytes(args.out, text)
    else:
        sys.stdout.write(text)
    if args.svg:
        _write_bytes(args.svg, bench.overlay_svg(sample, offsets))
    return EXIT_OK


def cmd_selftest(args):
    from . import selftest

    fault = args.inject_fault or os.environ.get(FAULT_ENV) or None
    started = time.perf_counter()
    checks = selftest.run_all(grad_instances=args.instances,
                              network_instances=args.network_instances, fault=fault)
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.passed]
    total = time.perf_counter() - started
    if failed:
        print(f"selftest FAILED ({len(failed)}/{len(checks)}): {'; '.join(failed)} [{total:.1f}s]")
        return EXIT_SELFTEST
    print(f"selftest passed: {len(checks)} checks in {total:.1f}s")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "selftest": cmd_selftest}

DATA_ERRORS = (FormatError, ValidationError, InvalidObservationError, InvalidSampleError,
               DegenerateDataError, DimensionError, OSError)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"egoforecast {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"egoforecast {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EgoForecastError as exc:
        print(f"egoforecast {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
