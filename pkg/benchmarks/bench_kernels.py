"""Timing comparison of the compiled and pure-python kernel backends.

Run as:  python3 benchmarks/bench_kernels.py [--repeats N]

The conv kernels are dispatched by input size (exact-order loop kernels for
small maps, im2col + BLAS for large ones), so both regimes are measured.
Set CTADEPTH_PURE_PYTHON=1 to force the fallback backend at import time;
this script instead imports both modules directly so one process can time
them side by side.
"""

import argparse
import time

import numpy as np

from ctadepth._kernels import _blas, _kernels_py

try:
    from ctadepth._kernels import _kernels_cy
except ImportError:
    _kernels_cy = None


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv(rng, repeats):
    cases = [
        ("conv 3x3 small  (8x8, 16->16)", (16, 8, 8), (16, 16, 3, 3)),
        ("conv 3x3 medium (16x24, 32->32)", (32, 16, 24), (32, 32, 3, 3)),
        ("conv 3x3 large  (64x96, 16->16)", (16, 64, 96), (16, 16, 3, 3)),
    ]
    for label, xshape, wshape in cases:
        x = rng.standard_normal(xshape)
        w = rng.standard_normal(wshape)
        gout = rng.standard_normal(
            (wshape[0],) + _kernels_py.conv2d_forward(x, w, 1, 1).shape[1:])
        rows = [("python", _kernels_py), ("blas", _blas)]
        if _kernels_cy is not None:
            rows.insert(1, ("cython", _kernels_cy))
        print(label)
        ref = None
        for name, mod in rows:
            fwd = _time(lambda m=mod: m.conv2d_forward(x, w, 1, 1), repeats)
            bwd = _time(lambda m=mod: m.conv2d_backward(x, w, 1, 1, gout), repeats)
            out = mod.conv2d_forward(x, w, 1, 1)
            if ref is None:
                ref = out
                diff = 0.0
            else:
                diff = np.abs(out - ref).max()
            print(f"  {name:7s} fwd {fwd * 1e3:8.3f} ms   bwd {bwd * 1e3:8.3f} ms"
                  f"   max diff vs python {diff:.2e}")


def bench_bilinear(rng, repeats):
    feat = rng.standard_normal((32, 64, 96))
    xs = rng.uniform(0, 95, 64 * 96)
    ys = rng.uniform(0, 63, 64 * 96)
    print("bilinear sample (32ch, 6144 points)")
    rows = [("python", _kernels_py)]
    if _kernels_cy is not None:
        rows.append(("cython", _kernels_cy))
    ref = None
    for name, mod in rows:
        out, valid = mod.bilinear_forward(feat, xs, ys)
        gout = np.ones_like(out)
        fwd = _time(lambda m=mod: m.bilinear_forward(feat, xs, ys), repeats)
        bwd = _time(lambda m=mod: m.bilinear_backward(feat, xs, ys, gout, valid),
                    repeats)
        if ref is None:
            ref, diff = out, 0.0
        else:
            diff = np.abs(out - ref).max()
        print(f"  {name:7s} fwd {fwd * 1e3:8.3f} ms   bwd {bwd * 1e3:8.3f} ms"
              f"   max diff vs python {diff:.2e}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    if _kernels_cy is None:
        print("note: compiled extension not available, timing fallback only")
    rng = np.random.default_rng(args.seed)
    bench_conv(rng, args.repeats)
    bench_bilinear(rng, args.repeats)


if __name__ == "__main__":
    main()
