"""Time the compiled LSTM recurrence against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--batch 64] [--t 100] [--hidden 64] [--repeat 5]

Both backends are imported directly, so one process measures both.  A
final line times one full training epoch per backend in a subprocess,
with ``CELLATTN_PURE_PYTHON`` toggling the selection made at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cellattn import _kernels_py

try:
    from cellattn import _ckernels
except ImportError:  # extension not built
    _ckernels = None

EPOCH_SNIPPET = """
import time
from cellattn import datagen, kernels
from cellattn.cells import ModelSpec
from cellattn.training import TrainConfig, train
tr, te = datagen.make_splits("earlier", 0, {n}, 50)
spec = ModelSpec.from_name("{model}", 100, 2, hidden=64, t_max=100)
t0 = time.perf_counter()
train(spec, tr, te, TrainConfig(max_epochs=1))
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def bench(mod, gates_x, w_h, repeat):
    hs, cache = mod.lstm_forward(gates_x, w_h)
    d_hs = np.ones_like(hs)
    fwd = min(timeit.repeat(lambda: mod.lstm_forward(gates_x, w_h), number=1, repeat=repeat))
    bwd = min(timeit.repeat(lambda: mod.lstm_backward(d_hs, hs, cache, w_h), number=1, repeat=repeat))
    return fwd, bwd


def epoch(model, n, pure):
    env = dict(os.environ)
    env.pop("CELLATTN_PURE_PYTHON", None)
    if pure:
        env["CELLATTN_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET.format(model=model, n=n)],
                         env=env, capture_output=True, text=True, check=True)
    backend, secs = out.stdout.split()
    return backend, float(secs)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--t", type=int, default=100)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--epoch-samples", type=int, default=256, help="0 skips the epoch timing")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    h = args.hidden
    print(f"batch={args.batch} T={args.t} hidden={h}, best of {args.repeat}")
    print(f"{'dtype':8} {'backend':9} {'forward ms':>11} {'backward ms':>12} {'speedup':>8}")
    for dtype in (np.float64, np.float32):
        gates_x = rng.normal(size=(args.batch, args.t, 4 * h)).astype(dtype)
        w_h = (rng.uniform(-1, 1, size=(h, 4 * h)) / np.sqrt(h)).astype(dtype)
        py = bench(_kernels_py, gates_x, w_h, args.repeat)
        rows = [("python", py)]
        if _ckernels is not None:
            rows.append(("compiled", bench(_ckernels, gates_x, w_h, args.repeat)))
        for name, (f, b) in rows:
            speed = (py[0] + py[1]) / (f + b)
            print(f"{np.dtype(dtype).name:8} {name:9} {f * 1e3:11.2f} {b * 1e3:12.2f} {speed:7.2f}x")

    if args.epoch_samples:
        print(f"\none training epoch, {args.epoch_samples} samples, T=N=100, hidden=64")
        for model in ("lstm", "lstm-incell"):
            for pure in (True, False):
                backend, secs = epoch(model, args.epoch_samples, pure)
                print(f"{model:12} {backend:9} {secs:7.2f} s")


if __name__ == "__main__":
    main()
