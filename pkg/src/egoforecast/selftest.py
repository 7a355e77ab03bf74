"""Built-in consistency checks: layer shapes, gradients, ego-motion closed loop."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import features as ft
from . import model as M
from . import tensor as tc

# expected per-stream and output-stream activation sizes (channels, length)
STREAM_SHAPES = [(32, 8), (64, 6), (128, 4), (128, 2)]
OUTPUT_SHAPES = [(384, 2), (256, 2), (256, 2), (256, 4), (128, 6), (64, 8), (32, 10), (3, 10)]


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<34} {self.detail} ({self.seconds:.2f}s)"


def traced_shapes(config, n=2, seed=0):
    net = M.build_network(config, seed=seed)
    rng = np.random.default_rng(seed)
    ins = {s.kind: rng.standard_normal((n, s.input_dim, config.t_prev)) for s in config.enabled_streams}
    trace = []
    with tc.no_grad():
        out = net.forward(ins.get("location_scale"), ins.get("ego_motion"), ins.get("pose"),
                          mode="eval", trace=trace)
    return trace, out.shape


def check_architecture():
    problems = []
    trace, out_shape = traced_shapes(M.NetConfig())
    shapes = dict(trace)
    for short in ("ls", "ego", "pose"):
        got = [shapes[f"{short}.conv{i}"][1:] for i in range(1, 5)]
        if got != STREAM_SHAPES:
            problems.append(f"{short} stream {got}")
    head = ["out.concat", "out.conv1", "out.conv2", "out.deconv1", "out.deconv2", "out.deconv3",
            "out.deconv4", "out.final"]
    got = [shapes[h][1:] for h in head]
    if got != OUTPUT_SHAPES:
        problems.append(f"output stream {got}")
    short_cfg = M.NetConfig(t_prev=6, input_paddings=(1, 1, 0, 0))
    if short_cfg.encoder_lengths() != [6, 6, 4, 2]:
        problems.append(f"T_prev=6 encoder {short_cfg.encoder_lengths()}")
    long_cfg = M.NetConfig(t_future=20, deconv_kernels=(3, 5, 7, 7))
    if long_cfg.decoder_lengths() != [4, 8, 14, 20]:
        problems.append(f"T_future=20 decoder {long_cfg.decoder_lengths()}")
    for cfg in (short_cfg, long_cfg):
        _, shp = traced_shapes(cfg)
        if shp[1:] != (3, cfg.t_future):
            problems.append(f"variant output {shp}")
    return not problems, "; ".join(problems) or "default shapes and both length variants reproduced"


# --------------------------------------------------------------------------
# gradient checks

def _rand_tensor(rng, shape, lo=-1.0, hi=1.0):
    return tc.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def layer_cases(seed):
    """(name, fragment, inputs, params) gradcheck cases for one seed."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    cases = []

    c_in, c_out, k, length = (int(v) for v in rng.integers([1, 1, 1, 3], [5, 5, 4, 8]))
    w, b = _rand_tensor(rng, (c_out, c_in, k)), _rand_tensor(rng, (c_out,))
    cases.append(("conv1d", lambda xs, w=w, b=b: tc.conv1d(xs[0], w, b, 0),
                  [(n, c_in, max(length, k))], [w, b]))
    w1, b1 = _rand_tensor(rng, (c_out, c_in, 3)), _rand_tensor(rng, (c_out,))
    cases.append(("conv1d_padded", lambda xs, w=w1, b=b1: tc.conv1d(xs[0], w, b, 1),
                  [(n, c_in, length)], [w1, b1]))
    wd, bd = _rand_tensor(rng, (c_in, c_out, k)), _rand_tensor(rng, (c_out,))
    cases.append(("deconv1d", lambda xs, w=wd, b=bd: tc.deconv1d(xs[0], w, b),
                  [(n, c_in, length)], [wd, bd]))

    ch = int(rng.integers(1, 5))
    bn = tc.BatchNorm("bn", ch)
    bn.gamma.tensor.data[:] = rng.uniform(0.5, 1.5, ch)
    bn.beta.tensor.data[:] = rng.uniform(-0.5, 0.5, ch)

    def bn_train(xs, bn=bn):
        bn.mode = "train"
        return tc.batchnorm1d(xs[0], bn)
    cases.append(("batchnorm1d_train", bn_train, [(n + 1, ch, length)], [bn.gamma, bn.beta]))

    bne = tc.BatchNorm("bne", ch)
    bne.gamma.tensor.data[:] = rng.uniform(0.5, 1.5, ch)
    bne.beta.tensor.data[:] = rng.uniform(-0.5, 0.5, ch)
    bne.running_mean = rng.uniform(-0.5, 0.5, ch)
    bne.running_var = rng.uniform(0.5, 2.0, ch)
    bne.mode = "eval"
    cases.append(("batchnorm1d_eval", lambda xs, bn=bne: tc.batchnorm1d(xs[0], bn),
                  [(n, ch, length)], [bne.gamma, bne.beta]))

    away = rng.uniform(0.1, 1.0, (n, ch, length)) * rng.choice([-1.0, 1.0], (n, ch, length))
    cases.append(("relu", lambda xs: tc.relu(xs[0]), [away], []))
    widths = [int(v) for v in rng.integers(1, 4, size=3)]
    cases.append(("concat", lambda xs: tc.concat_channels(xs),
                  [(n, c, length) for c in widths], []))
    cases.append(("mse", lambda xs: tc.mse_loss(xs[0], xs[1]), [(n, 2, length), (n, 2, length)], []))
    return cases


def check_layer_gradients(instances=3, tolerance=1e-4):
    worst = {}
    for seed in range(instances):
        for name, frag, inputs, params in layer_cases(seed):
            rep = tc.gradcheck(frag, inputs, params, tolerance=tolerance, seed=seed)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
    bad = [f"{k}={v:.2e}" for k, v in worst.items() if not v < tolerance]
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return not bad, (f"failing: {', '.join(bad)}" if bad else f"max rel err: {detail}"), worst


def network_case(seed, config=None, n=2):
    """Full network with randomized eval-mode running statistics."""
    config = config or M.NetConfig()
    net = M.build_network(config, seed=seed)
    rng = np.random.default_rng(seed + 10_000)
    for bn in net.batchnorms().values():
        bn.running_mean = rng.uniform(-0.2, 0.2, bn.channel_count)
        bn.running_var = rng.uniform(0.5, 1.5, bn.channel_count)
        bn.gamma.tensor.data[:] = rng.uniform(0.8, 1.2, bn.channel_count)
        bn.beta.tensor.data[:] = rng.uniform(-0.1, 0.3, bn.channel_count)
    kinds = [s.kind for s in config.enabled_streams]
    shapes = [(n, s.input_dim, config.t_prev) for s in config.enabled_streams]

    def frag(xs):
        given = dict(zip(kinds, xs))
        return net.forward(given.get("location_scale"), given.get("ego_motion"), given.get("pose"),
                           mode="eval")

    return net, frag, shapes


def check_network_gradient(instances=1, tolerance=1e-4, max_coords=2):
    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for seed in range(instances):
        net, frag, shapes = network_case(seed)
        rep = tc.gradcheck(frag, shapes, net.parameters(), tolerance=tolerance, seed=seed,
                           max_coords=max_coords)
        checked += rep.checked
        skipped += rep.skipped_kinks
        if rep.max_rel_error >= worst:
            worst, worst_at = rep.max_rel_error, rep.worst
    ok = worst < tolerance
    where = f" at {worst_at[0]}" if worst_at else ""
    return ok, (f"max rel err {worst:.2e}{where} over {checked} coords "
                f"({skipped} kink-crossing skipped), {instances} instance(s)"), worst


# --------------------------------------------------------------------------
# ego closed loop

def ego_closed_loop(seed=0, frames=100):
    """Max errors (yaw, displacement) of accumulated ego-motion vs ground truth."""
    from .synthgen import SceneScript, generate_scene

    rng = np.random.default_rng(seed)
    knots = [(float(t), float(rng.uniform(-0.4, 0.4))) for t in np.arange(0, frames / 10 + 1, 1.0)]
    speed = [(float(t), float(rng.uniform(0.5, 1.8))) for t in np.arange(0, frames / 10 + 1, 1.0)]
    scene, _ = generate_scene(SceneScript("closed-loop", duration_frames=frames,
                                          wearer_speed=speed, wearer_yaw_rate=knots))
    feats = ft.accumulate_ego(scene.ego_rot[1:], scene.ego_trans[1:])
    yaw0 = scene.wearer_yaw[0]
    gt_yaw = np.angle(np.exp(1j * (yaw0 - scene.wearer_yaw[1:])))
    yaw_err = np.abs(np.angle(np.exp(1j * (feats[:, 0] - gt_yaw)))).max()
    base = ft.rot_y(yaw0)
    disp = np.column_stack([scene.wearer_pos[1:, 0] - scene.wearer_pos[0, 0],
                            np.zeros(frames),
                            scene.wearer_pos[1:, 1] - scene.wearer_pos[0, 1]]) @ base
    disp_err = np.abs(feats[:, 3:] - disp).max()
    return float(yaw_err), float(disp_err)


def check_ego_loop(seeds=3, tol=1e-6):
    worst_yaw, worst_disp = 0.0, 0.0
    for s in range(seeds):
        y, d = ego_closed_loop(s)
        worst_yaw, worst_disp = max(worst_yaw, y), max(worst_disp, d)
    zeros = ft.accumulate_ego(np.repeat(np.eye(3)[None], 10, axis=0), np.zeros((10, 3)))
    ok = worst_yaw < tol and worst_disp < tol and not np.any(zeros)
    return ok, f"yaw err {worst_yaw:.1e} rad, displacement err {worst_disp:.1e} m, zero-motion exact: {not np.any(zeros)}"


def run_all(grad_instances=3, network_instances=1, fault=None):
    """Run every check; ``fault`` names an op whose analytic gradient gets corrupted."""
    checks = []

    def timed(name, fn):
        t = time.perf_counter()
        ok, detail = fn()[:2]
        checks.append(Check(name, bool(ok), detail, time.perf_counter() - t))

    ctx = tc.inject_grad_fault(fault) if fault else _null()
    timed("architecture shapes", check_architecture)
    with ctx:
        timed("layer gradients", lambda: check_layer_gradients(grad_instances))
        timed("full-network gradient (eval BN)", lambda: check_network_gradient(network_instances))
    timed("ego-motion closed loop", check_ego_loop)
    return checks


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False
