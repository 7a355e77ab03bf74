"""Compare the compiled kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json PATH]

Times each kernel on the activation shapes of the default network at batch
size 64, checks both backends agree, then times one full training step
under each backend (in a subprocess so the backend switch takes effect).
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from egoforecast._kernels import _pykernels as py

try:
    from egoforecast._kernels import _ckernels as cy
except ImportError:
    cy = None

# (name, c_in, c_out, length, k, pad) taken from the default network
CONV_SHAPES = [
    ("stream conv1", 36, 32, 10, 3, 0),
    ("stream conv3", 64, 128, 6, 3, 0),
    ("head conv1", 384, 256, 2, 1, 0),
    ("head conv2", 256, 256, 2, 1, 0),
]
BATCH = 64

STEP_SNIPPET = """
import time, numpy as np
from egoforecast import model, synthgen, data, _kernels
ss = synthgen.generate_suite("curved_ego", seed=0, n_samples=256).samples
ss.norm = data.compute_norm_stats(ss)
net = model.build_network(seed=0)
sched = model.TrainSchedule(iterations={iters}, decay_points=())
model.train(net, ss, model.TrainSchedule(iterations=2, decay_points=()), seed=0)
t = time.perf_counter()
model.train(net, ss, sched, seed=0)
print(_kernels.BACKEND, (time.perf_counter() - t) / {iters})
"""


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, ci, co, length, k, pad in CONV_SHAPES:
        x = rng.standard_normal((BATCH, ci, length))
        w = rng.standard_normal((co, ci, k))
        b = rng.standard_normal(co)
        g = rng.standard_normal((BATCH, co, length + 2 * pad - k + 1))
        cases = {
            "forward": lambda m: m.conv1d_forward(x, w, b, pad),
            "backward": lambda m: m.conv1d_backward(x, w, g, pad),
        }
        for op, call in cases.items():
            row = {"kernel": f"conv1d {op}", "shape": name, "python_us": best(lambda: call(py), repeat) * 1e6}
            if cy is not None:
                ref, got = call(py), call(cy)
                ref = ref if isinstance(ref, tuple) else (ref,)
                got = got if isinstance(got, tuple) else (got,)
                row["max_abs_diff"] = max(float(np.abs(a - c).max()) for a, c in zip(ref, got))
                row["cython_us"] = best(lambda: call(cy), repeat) * 1e6
            rows.append(row)
    x = rng.standard_normal((BATCH, 128, 4))
    gamma, beta = rng.standard_normal(128), rng.standard_normal(128)
    row = {"kernel": "batchnorm forward", "shape": "128x4",
           "python_us": best(lambda: py.batchnorm_forward(x, gamma, beta, 1e-5), repeat) * 1e6}
    if cy is not None:
        row["cython_us"] = best(lambda: cy.batchnorm_forward(x, gamma, beta, 1e-5), repeat) * 1e6
    rows.append(row)
    return rows


def bench_step(iters):
    out = {}
    for backend in ("python", "cython"):
        if backend == "cython" and cy is None:
            continue
        env = dict(os.environ, EGOFORECAST_KERNELS="python" if backend == "python" else "")
        r = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(iters=iters)], env=env,
                           capture_output=True, text=True, check=True)
        name, sec = r.stdout.split()
        out[name] = float(sec)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--steps", type=int, default=20, help="training steps to time per backend")
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()

    rows = bench_kernels(args.repeat)
    print(f"{'kernel':<20}{'shape':<15}{'numpy us':>10}{'cython us':>11}{'speedup':>9}")
    for r in rows:
        c = r.get("cython_us")
        print(f"{r['kernel']:<20}{r['shape']:<15}{r['python_us']:>10.1f}"
              + (f"{c:>11.1f}{r['python_us'] / c:>8.2f}x" if c else f"{'-':>11}{'-':>9}"))
    step = bench_step(args.steps)
    for name, sec in step.items():
        print(f"training step ({name}): {sec * 1e3:.1f} ms")
    if len(step) == 2:
        print(f"training step speedup: {step['python'] / step['cython']:.2f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"kernels": rows, "train_step_seconds": step}, fh, indent=2)


if __name__ == "__main__":
    main()
