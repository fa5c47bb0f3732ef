"""Time each compiled kernel against its pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--size 64] [--repeat 5]

Inputs are taken from a toy forgery image so the image kernels see
realistic edge and mask statistics.  The table gives best-of-N wall time
per call and the speedup.
"""

import argparse
import timeit

import numpy as np

from ffdetect import kernels
from ffdetect.data import make_sample
from ffdetect.imaging import to_gray
from ffdetect.mid import sobel_gradients


def workloads(size: int, rng: np.random.Generator) -> dict:
    gray = to_gray(make_sample(1, size, 0, 0).image)
    gx, gy = sobel_gradients(gray)
    mag = np.hypot(gx, gy)
    mag = mag / mag.max()
    blobs = rng.uniform(size=(size, size)) < 0.45
    points = rng.uniform(size=(size * size, 5))
    centers = rng.uniform(size=(4, 5))
    act = rng.standard_normal((8, size, 256))
    n = 1_000_000
    w, g = rng.standard_normal(n), rng.standard_normal(n)

    def adam(b):
        m, v, p = np.zeros(n), np.zeros(n), w.copy()
        return lambda: b.adamw_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.01, 1)

    def gelu_bwd(b):
        _, t = b.gelu_forward(act)
        return lambda: b.gelu_backward(act, t, act)

    return {
        "nms": lambda b: (lambda: b.nms(mag, gx, gy)),
        "hysteresis": lambda b: (lambda: b.hysteresis(mag, 0.1, 0.3)),
        "label_components": lambda b: (lambda: b.label_components(blobs, 4)),
        "kmeans_assign": lambda b: (lambda: b.kmeans_assign(points, centers)),
        "window_max": lambda b: (lambda: b.window_max(mag, 3)),
        "gelu_forward": lambda b: (lambda: b.gelu_forward(act)),
        "gelu_backward": gelu_bwd,
        "adamw_update": adam,
    }


def best_time(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 1 << 12:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64, help="image side for the image kernels")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernels are not built; only the Python timings are shown")
    jobs = workloads(args.size, np.random.default_rng(0))
    print(f"{'kernel':18s}" + "".join(f"{b:>14s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name in kernels.KERNEL_NAMES:
        times = [best_time(jobs[name](kernels.get_backend(b)), args.repeat) for b in backends]
        row = f"{name:18s}" + "".join(f"{t * 1e3:12.3f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
