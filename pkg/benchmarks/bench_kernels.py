"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is run on a workload shaped like the desk-preset training loop
(64x64 images, batch 8) and the best of N runs is reported.
"""

import argparse
import timeit

import numpy as np

from lowbridge import _pykernels as py

try:
    from lowbridge import _ckernels as cy
except ImportError:  # extension not built
    cy = None


def workloads(rng):
    x = rng.normal(size=(8, 16, 64, 64)).astype(np.float32)
    cols = rng.normal(size=(8, 16 * 9, 64 * 64)).astype(np.float32)
    mag = rng.random((64, 64))
    bins = rng.integers(0, 4, size=(64, 64)).astype(np.int8)
    sup = py.nms(mag, bins)
    a = np.ascontiguousarray(np.argwhere(rng.random((64, 64)) < 0.05))
    b = np.ascontiguousarray(np.argwhere(rng.random((64, 64)) < 0.05))
    _, arg = py.maxpool2x2_forward(x)
    g = rng.normal(size=(8, 16, 32, 32)).astype(np.float32)
    blob = rng.integers(0, 256, 1 << 20, dtype=np.uint8)
    return {
        "im2col 8x16x64x64 k3": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im 8x16x64x64 k3": lambda k: k.col2im(cols, x.shape, 3, 3, 1, 1),
        "maxpool fwd": lambda k: k.maxpool2x2_forward(x),
        "maxpool bwd": lambda k: k.maxpool2x2_backward(g, arg),
        "nms 64x64": lambda k: k.nms(mag, bins),
        "hysteresis 64x64": lambda k: k.hysteresis(sup, 0.2, 0.5),
        "min distances": lambda k: k.min_distances(a, b, 1.0, 1.0),
        "crc64 1 MiB": lambda k: k.crc64(blob),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = [("python", py)] + ([("cython", cy)] if cy is not None else [])
    print(f"{'kernel':24s}" + "".join(f"{name:>12s}" for name, _ in backends) + ("     speedup" if cy else ""))
    for label, fn in workloads(np.random.default_rng(0)).items():
        times = [min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) for _, k in backends]
        row = f"{label:24s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)
    if cy is None:
        print("compiled extension not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
