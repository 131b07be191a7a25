#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-NumPy fallback.

Measures the shapes the runtime actually hits (stem conv, dense-block convs,
the 1x1 transition conv, pooling, and bilinear resampling) and prints one
row per op and backend. Run after any kernel change; the conv routing
threshold in herbid/kernels/__init__.py is justified by these numbers.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from herbid.kernels import available_backends, get_backend


def timeit(fn, repeat: int) -> float:
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(7)
    backends = {name: get_backend(name) for name in available_backends()}
    if "cython" not in backends:
        print("compiled extension not built; benchmarking the fallback only")

    conv_cases = [
        ("conv 3->16 3x3 @256", (1, 3, 256, 256), (16, 3, 3, 3)),
        ("conv 16->8 3x3 @256", (1, 16, 256, 256), (8, 16, 3, 3)),
        ("conv 40->8 3x3 @256", (1, 40, 256, 256), (8, 40, 3, 3)),
        ("conv 48->16 1x1 @256", (1, 48, 256, 256), (16, 48, 1, 1)),
        ("conv 40->8 3x3 @128", (1, 40, 128, 128), (8, 40, 3, 3)),
    ]
    rows = []
    for label, xshape, wshape in conv_cases:
        x = rng.random(xshape, dtype=np.float32)
        w = rng.standard_normal(wshape).astype(np.float32)
        b = rng.standard_normal(wshape[0]).astype(np.float32)
        pad = (wshape[2] // 2,) * 2 + (wshape[3] // 2,) * 2
        macs = (
            xshape[0] * wshape[0] * wshape[1] * wshape[2] * wshape[3]
            * xshape[2] * xshape[3]
        )
        entry = {"label": label, "gmacs": macs / 1e9}
        for name, be in backends.items():
            entry[name] = timeit(lambda be=be: be.conv2d(x, w, b, (1, 1), pad), args.repeat)
        if "cython" in backends:
            be = backends["cython"]
            entry["cython-direct"] = timeit(
                lambda be=be: be.conv2d_direct(x, w, b, (1, 1), pad), args.repeat
            )
        rows.append(entry)

    x = rng.random((1, 48, 256, 256), dtype=np.float32)
    for label, fn_name, fargs in [
        ("avgpool 2x2 @256", "avgpool2d", ((2, 2), (2, 2))),
        ("maxpool 2x2 @256", "maxpool2d", ((2, 2), (2, 2))),
    ]:
        entry = {"label": label}
        for name, be in backends.items():
            fn = getattr(be, fn_name)
            entry[name] = timeit(lambda fn=fn: fn(x, *fargs), args.repeat)
        rows.append(entry)

    img = rng.random((3, 512, 512), dtype=np.float32)
    entry = {"label": "resize 512->256"}
    for name, be in backends.items():
        entry[name] = timeit(lambda be=be: be.resize_bilinear(img, 256, 256), args.repeat)
    rows.append(entry)

    img256 = rng.random((3, 256, 256), dtype=np.float32)
    gy = rng.uniform(0, 255, (256, 256))
    gx = rng.uniform(0, 255, (256, 256))
    entry = {"label": "warp 256x256"}
    for name, be in backends.items():
        entry[name] = timeit(lambda be=be: be.warp_bilinear(img256, gy, gx, 0.0), args.repeat)
    rows.append(entry)

    cols = ["python", "cython", "cython-direct"]
    print(f"{'op':<24}" + "".join(f"{c:>16}" for c in cols))
    for entry in rows:
        line = f"{entry['label']:<24}"
        for c in cols:
            line += f"{entry[c] * 1e3:>13.2f} ms" if c in entry else f"{'-':>16}"
        print(line)


if __name__ == "__main__":
    main()
