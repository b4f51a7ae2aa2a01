"""Compare the compiled and numpy kernels on representative shapes.

    python benchmarks/bench_kernels.py [--repeats N]

Prints one CSV row per (kernel, shape): median seconds for each backend and
the speedup. Also checks that both backends return identical arrays.
"""
import argparse
import statistics
import sys
import time

import numpy as np

from mtunet.kernels import compiled_kernels, python_kernels


def median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(rng):
    for b, c, s, k, stride in [(4, 32, 66, 3, 1), (4, 128, 18, 3, 1), (4, 64, 34, 4, 2)]:
        out = (s - k) // stride + 1
        x = rng.standard_normal((b, c, s, s)).astype(np.float32)
        yield f"im2col b{b} c{c} {s}x{s} k{k} s{stride}", "im2col", (x, k, stride, out, out)
        cols = rng.standard_normal((b, c * k * k, out * out)).astype(np.float32)
        yield f"col2im b{b} c{c} {s}x{s} k{k} s{stride}", "col2im", (cols, c, s, s, k, stride)
    for n in (200, 800):
        a, bb = rng.random((n, 2)) * 64, rng.random((n, 2)) * 64
        yield f"min_distances {n}x{n}", "min_distances", (a, bb)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args(argv)
    if compiled_kernels is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print("case,python_s,compiled_s,speedup")
    for label, name, inputs in cases(rng):
        py, cy = getattr(python_kernels, name), getattr(compiled_kernels, name)
        if not np.array_equal(py(*inputs), cy(*inputs)):
            print(f"backends disagree on {label}", file=sys.stderr)
            return 1
        tp = median_time(lambda: py(*inputs), args.repeats)
        tc = median_time(lambda: cy(*inputs), args.repeats)
        print(f"{label},{tp:.6f},{tc:.6f},{tp / tc:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
