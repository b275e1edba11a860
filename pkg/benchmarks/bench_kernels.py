"""Time each accelerated kernel against its numpy twin.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--scale S]

The compiled path is warmed up once before timing so JIT compilation is not
counted.  Outputs of both paths are compared as a sanity check.
"""
import argparse
import time

import numpy as np

from satstereo._accel import HAS_NUMBA
from satstereo.dsm import _fuse, _rasterize
from satstereo.groundtruth import _zbuffer
from satstereo.rectify import _warp
from satstereo.sgm import _census, _hamming, _path, _speckle_labels


def _cases(scale, rng):
    h, w = int(256 * scale), int(512 * scale)
    img = rng.random((h, w))
    hinv = np.array([[0.98, 0.03, 4.0], [-0.02, 1.01, -3.0], [0.0, 0.0, 1.0]])
    n = h * w
    rows, cols = rng.integers(0, h, n), rng.integers(0, w, n)
    alt = rng.integers(0, 50, n).astype(np.float64)
    sig_l = _census.numpy(img, 5)
    sig_r = _census.numpy(np.roll(img, 3, axis=1), 5)
    cost = rng.integers(0, 25, (h, w, 32)).astype(np.int64)
    disp = np.round(rng.random((h, w)) * 4) * 0.8
    stack = rng.normal(20, 2, (6, h // 2, w // 2))

    def path(impl):
        def run():
            total = np.zeros_like(cost)
            impl(cost, 1, 1, np.int64(10), np.int64(120), total)
            return total
        return run

    return [
        ("warp", lambda k: lambda: k(img, hinv, h, w), _warp),
        ("zbuffer", lambda k: lambda: k(rows, cols, img.ravel(), alt, h, w), _zbuffer),
        ("census 5x5", lambda k: lambda: k(img, 5), _census),
        ("hamming D=32", lambda k: lambda: k(sig_l, sig_r, 32, 24), _hamming),
        ("sgm path", path, _path),
        ("speckle labels", lambda k: lambda: k(disp, np.ones((h, w), bool), 1.0), _speckle_labels),
        ("rasterize", lambda k: lambda: k(rows // 2, cols // 2, img.ravel(), h // 2, w // 2),
         _rasterize),
        ("fuse 6 DSMs", lambda k: lambda: k(stack, 0.5), _fuse),
    ]


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, equal_nan=True) for x, y in zip(a, b))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--scale", type=float, default=1.0, help="image size relative to 256x512")
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    if not HAS_NUMBA:
        print("numba is not importable; only the numpy path can run")
    print(f"{'kernel':<16}{'numba [ms]':>12}{'numpy [ms]':>12}{'speed-up':>10}  match")
    for name, make, kernel in _cases(args.scale, rng):
        t_np, out_np = _best(make(kernel.numpy), args.repeat)
        if HAS_NUMBA:
            make(kernel.jit)()  # compile
            t_jit, out_jit = _best(make(kernel.jit), args.repeat)
            print(f"{name:<16}{1e3 * t_jit:>12.2f}{1e3 * t_np:>12.2f}{t_np / t_jit:>9.1f}x  "
                  f"{_same(out_jit, out_np)}")
        else:
            print(f"{name:<16}{'-':>12}{1e3 * t_np:>12.2f}{'-':>10}  -")


if __name__ == "__main__":
    main()
