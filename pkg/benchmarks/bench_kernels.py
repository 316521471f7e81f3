"""Benchmark the compiled kernel core against the pure-NumPy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Times the three hot kernels on training-shaped workloads:
* conv2d forward + backward on a (32, 1, 64, 64) float32 batch through
  the production layer widths;
* conv2d forward on a full-resolution (1, 16, 512, 512) feature map
  (the score-map path);
* the bilateral range filter on a 1024x1024 float64 image.
"""

import argparse
import time

import numpy as np

from texqual.kernels import _npops

try:
    from texqual.kernels import _cyops
except ImportError:
    _cyops = None


def _timeit(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_train_step(impl, rng, repeats):
    widths = [(1, 16, 2), (16, 32, 2), (32, 64, 2), (64, 64, 1)]
    x = rng.random((32, 1, 64, 64), dtype=np.float32)
    layers = [
        (rng.standard_normal((cout, cin, 3, 3), dtype=np.float32) * 0.1,
         np.zeros(cout, dtype=np.float32), stride)
        for cin, cout, stride in widths
    ]

    def step():
        acts = []
        h = x
        for w, b, stride in layers:
            acts.append(h)
            h = np.maximum(impl.conv2d_forward(h, w, b, stride), 0)
        dy = np.ones_like(h)
        for (w, b, stride), cached in zip(reversed(layers), reversed(acts)):
            dy, _, _ = impl.conv2d_backward(cached, w, dy, stride)

    return _timeit(step, repeats)


def bench_score_map_conv(impl, rng, repeats):
    x = rng.random((1, 16, 512, 512), dtype=np.float32)
    w = rng.standard_normal((32, 16, 3, 3), dtype=np.float32) * 0.1
    b = np.zeros(32, dtype=np.float32)
    return _timeit(lambda: impl.conv2d_forward(x, w, b, 2), repeats)


def bench_bilateral(impl, rng, repeats):
    img = np.ascontiguousarray(0.5 + 0.1 * rng.standard_normal((1024, 1024)))
    return _timeit(lambda: impl.bilateral_filter(img, 3, 2.0, 0.1), repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    impls = [("numpy", _npops)]
    if _cyops is not None:
        impls.append(("cython", _cyops))
    else:
        print("compiled backend not built; showing fallback only")

    benches = [
        ("train step (fwd+bwd, batch 32 @ 64px)", bench_train_step),
        ("score-map conv (1x16x512x512)", bench_score_map_conv),
        ("bilateral filter (1024^2, r=3)", bench_bilateral),
    ]
    results = {}
    for bname, fn in benches:
        for iname, impl in impls:
            results[(bname, iname)] = fn(impl, rng, args.repeats)

    width = max(len(b) for b, _ in benches)
    print(f"{'kernel'.ljust(width)}  {'numpy':>10}  {'cython':>10}  {'speedup':>8}")
    for bname, _ in benches:
        t_np = results[(bname, "numpy")]
        line = f"{bname.ljust(width)}  {t_np * 1e3:9.2f}ms"
        if (bname, "cython") in results:
            t_cy = results[(bname, "cython")]
            line += f"  {t_cy * 1e3:9.2f}ms  {t_np / t_cy:7.2f}x"
        print(line)


if __name__ == "__main__":
    main()
