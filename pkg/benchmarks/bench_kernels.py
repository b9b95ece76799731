"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each kernel is warmed up once per backend (numba compiles on first call), then
timed ``--repeat`` times; the median is reported. A training-step benchmark
(forward + backward of the small residual net) is included since that is
where the kernels matter in practice.
"""

import argparse
import json
import statistics
import time

import numpy as np

from splitcomp import _jit, kernels
from splitcomp.model.graph import backward, forward_train
from splitcomp.model.zoo import build_teacher
from splitcomp.losses import ce_loss_grad


def _cases(rng):
    x = rng.standard_normal((64, 32, 16, 16)).astype(np.float32)
    cols = kernels.im2col(x, 3, 3, (1, 1), (1, 1))
    pooled, arg = kernels.maxpool_forward(x, 2, 2, 0)
    dy = rng.standard_normal(pooled.shape).astype(np.float32)
    flat = rng.standard_normal(64 * 12 * 29 * 29).astype(np.float32)
    scale = float(np.abs(flat).max() / 127)
    times = np.cumsum(rng.uniform(0.5, 1.5, 2000))
    times -= times[0]
    rates = rng.uniform(1e5, 1e7, 2000)
    t0s = rng.uniform(0, times[-1] * 0.5, 5000)
    bits = np.full(5000, 8.0 * 602112)

    model = build_teacher("small_resnet", seed=0)
    xb = rng.standard_normal((64, 3, 32, 32)).astype(np.float32)
    yb = rng.integers(0, 10, 64)

    def train_step():
        model.zero_grads()
        out, caches, _ = forward_train(model, xb)
        _, g = ce_loss_grad(out, yb)
        backward(model, caches, g.astype(np.float32))

    return {
        "im2col 64x32x16x16 k3": lambda: kernels.im2col(x, 3, 3, (1, 1), (1, 1)),
        "col2im 64x32x16x16 k3": lambda: kernels.col2im(cols, x.shape, 3, 3, (1, 1), (1, 1)),
        "maxpool fwd": lambda: kernels.maxpool_forward(x, 2, 2, 0),
        "maxpool bwd": lambda: kernels.maxpool_backward(dy, arg, x.shape),
        "quantize int8 64x12x29x29": lambda: kernels.quantize_int8(flat, scale),
        "trace drain 5000x2000": lambda: kernels.trace_transfer_times(times, rates, t0s, bits),
        "train step small_resnet b64": train_step,
    }


def time_case(fn, repeat):
    fn()  # warm-up / compile
    samples = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t)
    return statistics.median(samples)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()

    results = {}
    for backend in ("numpy", "numba"):
        _jit.set_backend(backend)
        cases = _cases(np.random.default_rng(0))
        for name, fn in cases.items():
            results.setdefault(name, {})[backend] = time_case(fn, args.repeat)

    print(f"{'kernel':32s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}")
    for name, r in results.items():
        print(f"{name:32s} {1e3 * r['numpy']:11.3f} {1e3 * r['numba']:11.3f} {r['numpy'] / r['numba']:8.2f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=1)


if __name__ == "__main__":
    main()
