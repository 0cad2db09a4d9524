"""Time the compiled kernels against the NumPy fallback on model-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from paanet.kernels import available_backends


def cases(rng):
    f32 = np.float32
    xp = rng.normal(size=(8, 64, 34, 34)).astype(f32)
    cols = rng.normal(size=(8 * 32 * 32, 64 * 9)).astype(f32)
    dx = rng.normal(size=(8, 64, 34, 34)).astype(f32)
    small = rng.normal(size=(8, 16, 8, 8)).astype(f32)
    grad64 = rng.normal(size=(8, 16, 64, 64)).astype(f32)
    mini = rng.normal(size=(8, 64, 66, 66)).astype(f32)
    wmini = rng.normal(size=(1, 64, 3, 3)).astype(f32)
    gmini = rng.normal(size=(8, 1, 64, 64)).astype(f32)
    return [
        ("im2col 8x64x32x32 k3", lambda k: k.im2col(xp, 3, 1, 32, 32)),
        ("col2im 8x64x32x32 k3", lambda k: k.col2im(cols, dx.shape, 3, 1, 32, 32)),
        ("resize 8x16 8->64", lambda k: k.resize_forward(small, 64, 64)),
        ("resize backward 64->8", lambda k: k.resize_backward(grad64, 8, 8)),
        ("direct conv fwd 64->1 @64", lambda k: k.conv_direct_forward(mini, wmini, 64, 64)),
        ("direct conv dX 1->64 @64", lambda k: k.conv_direct_backward_input(gmini, wmini, mini.shape)),
        ("direct conv dW 1x64 @64", lambda k: k.conv_direct_backward_weight(gmini, mini, 3)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = available_backends()
    names = sorted(backends)
    print(f"{'kernel':28s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for label, fn in cases(np.random.default_rng(0)):
        times = {}
        for n in names:
            fn(backends[n])  # warm-up
            times[n] = min(timeit.repeat(lambda: fn(backends[n]), number=1, repeat=args.repeat))
        row = f"{label:28s}" + "".join(f"{times[n] * 1e3:10.2f}ms" for n in names)
        if len(names) == 2:
            row += f"{times['python'] / times['cython']:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
