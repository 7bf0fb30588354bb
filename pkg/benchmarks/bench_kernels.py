"""Numba vs numpy timings for the hot kernels, plus an end-to-end training step.

    python benchmarks/bench_kernels.py [--repeat 50] [--steps 30] [--json out.json]

Kernel timings call both implementations in-process. The training-step timing
runs one subprocess per backend because the backend is fixed at import time
(``COSAL_DISABLE_NUMBA``).
"""
import argparse
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from cosal import kernels
from cosal._accel import HAVE_NUMBA
from cosal.geometry import to_corners


def _cases(rng):
    x = rng.standard_normal((16, 64, 64)).astype(np.float32)
    cols = kernels.NUMPY_KERNELS["im2col3x3"](x)
    pooled, arg = kernels.NUMPY_KERNELS["maxpool2"](x)
    feat = rng.standard_normal((32, 8, 8)).astype(np.float32)
    k = 384   # three regions per triplet, 128 triplets
    boxes = np.column_stack([rng.uniform(1, 7, k), rng.uniform(1, 7, k), rng.uniform(1, 6, k), rng.uniform(1, 6, k)])
    corners = to_corners(boxes)
    out, roi_arg = kernels.NUMPY_KERNELS["roi_align"](feat, corners, 7, 7, 2, False)
    up = rng.standard_normal(out.shape).astype(np.float32)
    return {
        "im2col3x3 16x64x64": ("im2col3x3", (x,)),
        "col2im3x3 16x64x64": ("col2im3x3", (cols, 16, 64, 64)),
        "maxpool2 16x64x64": ("maxpool2", (x,)),
        "maxpool2_backward": ("maxpool2_backward", (np.ones_like(pooled), arg)),
        "roi_align 384 boxes": ("roi_align", (feat, corners, 7, 7, 2, False)),
        "roi_align_backward": ("roi_align_backward", (up, roi_arg, corners, feat.shape, 2, False)),
    }


def time_call(fn, args, repeat):
    fn(*args)  # warm-up (jit compile / cache load)
    samples = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        samples.append(time.perf_counter() - t)
    return statistics.median(samples)


_STEP_SCRIPT = """
import time, numpy as np
from cosal.config import RunConfig
from cosal.data import synth_generate
from cosal.network import CoSaliencyNet
from cosal.training import iteration_rng
run = RunConfig.desk()
samples = synth_generate(8, 64, seed=0)
net = CoSaliencyNet(run.network, rng=np.random.default_rng(0))
def step(i):
    net.train_step(samples[i % 8], iteration_rng(0, i), run.optim.lr, run.optim.weight_decay, run.mode,
                   run.loss, run.sampling, clip_norm=run.optim.clip_norm)
for i in range(3):
    step(i)
t = time.perf_counter()
for i in range({steps}):
    step(i)
dt = (time.perf_counter() - t) / {steps}
t = time.perf_counter()
for s in samples:
    net.predict(s.image)
print(dt, (time.perf_counter() - t) / len(samples))
"""


def time_training(disable_numba, steps):
    env = dict(os.environ, COSAL_DISABLE_NUMBA="1" if disable_numba else "0")
    out = subprocess.run([sys.executable, "-c", _STEP_SCRIPT.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True)
    step, infer = map(float, out.stdout.split())
    return step, infer


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--steps", type=int, default=30)
    ap.add_argument("--json", help="also write results here")
    ap.add_argument("--skip-training", action="store_true")
    args = ap.parse_args(argv)

    if not HAVE_NUMBA:
        print("numba is not importable; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<24}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for label, (name, call_args) in _cases(rng).items():
        t_np = time_call(kernels.NUMPY_KERNELS[name], call_args, args.repeat)
        t_nb = time_call(kernels.NUMBA_KERNELS[name], call_args, args.repeat)
        rows.append({"kernel": label, "numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb})
        print(f"{label:<24}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>9.1f}x")

    result = {"kernels": rows}
    if not args.skip_training:
        step_np, inf_np = time_training(True, args.steps)
        step_nb, inf_nb = time_training(False, args.steps)
        result["train_step_ms"] = {"numpy": 1e3 * step_np, "numba": 1e3 * step_nb}
        result["predict_ms"] = {"numpy": 1e3 * inf_np, "numba": 1e3 * inf_nb}
        print(f"{'train step (online)':<24}{1e3 * step_np:>12.1f}{1e3 * step_nb:>12.1f}{step_np / step_nb:>9.1f}x")
        print(f"{'predict 64px':<24}{1e3 * inf_np:>12.2f}{1e3 * inf_nb:>12.2f}{inf_np / inf_nb:>9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
