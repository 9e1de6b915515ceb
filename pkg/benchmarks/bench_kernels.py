#!/usr/bin/env python3
"""Benchmark the compiled convolution kernels against the numpy fallback.

Times raw im2col/col2im plus a full conv2d forward+backward through the
engine with each backend selected, over geometries matching the shipped
architecture presets. Run:

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from dcl import _kernels as K
from dcl import autodiff as ad
from dcl.autodiff import Tape, Tensor

CASES = [
    # (label, N, C, H, W, out_ch, k, stride)
    ("toy-14 conv1", 64, 3, 14, 14, 16, 4, 2),
    ("mnist-24 conv2", 64, 32, 12, 12, 64, 4, 2),
    ("cifar-32 conv1", 64, 5, 32, 32, 64, 4, 2),
    ("cifar-32 conv3", 64, 128, 8, 8, 256, 4, 2),
]


def time_fn(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_raw(xp, k, stride, repeats):
    oh = (xp.shape[2] - k) // stride + 1
    ow = (xp.shape[3] - k) // stride + 1
    cols = K.im2col(xp, k, k, stride, stride, oh, ow)
    t_im = time_fn(lambda: K.im2col(xp, k, k, stride, stride, oh, ow), repeats)
    t_col = time_fn(lambda: K.col2im(cols, xp.shape[2], xp.shape[3], stride, stride),
                    repeats)
    return t_im, t_col


def bench_conv(x, w, stride, repeats):
    def step():
        with Tape() as tape:
            out = ad.conv2d(x, w, stride=stride, padding="same")
            loss = ad.sum_(ad.mul(out, out))
        ad.backward(loss, tape, [x, w])

    return time_fn(step, repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = K.available_backends()
    print(f"available backends: {', '.join(backends)} (active: {K.BACKEND})")
    if "cython" not in backends:
        print("compiled kernels not built; run `python3 setup.py build_ext --inplace`")

    rng = np.random.default_rng(0)
    header = f"{'case':<18}{'backend':<9}{'im2col':>10}{'col2im':>10}{'conv fwd+bwd':>14}"
    print(header)
    print("-" * len(header))
    rows = {}
    for label, n, c, h, w_, o, k, s in CASES:
        xp = rng.standard_normal((n, c, h + 2, w_ + 2)).astype(np.float32)
        x = Tensor(rng.standard_normal((n, c, h, w_)).astype(np.float32),
                   requires_grad=True)
        wt = Tensor((rng.standard_normal((o, c, k, k)) * 0.05).astype(np.float32),
                    requires_grad=True)
        for backend in backends:
            K.set_backend(backend)
            t_im, t_col = bench_raw(xp, k, s, args.repeats)
            t_conv = bench_conv(x, wt, s, args.repeats)
            rows[(label, backend)] = t_conv
            print(f"{label:<18}{backend:<9}{t_im * 1e3:>9.2f}ms{t_col * 1e3:>9.2f}ms"
                  f"{t_conv * 1e3:>13.2f}ms")
    if len(backends) > 1:
        print()
        for label, *_ in CASES:
            ratio = rows[(label, "numpy")] / rows[(label, "cython")]
            print(f"{label:<18} conv speedup cython vs numpy: {ratio:.2f}x")
    K.set_backend("cython" if "cython" in backends else "numpy")


if __name__ == "__main__":
    main()
