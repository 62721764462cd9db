#!/usr/bin/env python3
"""Compare the compiled kernel core against the pure-numpy fallback.

Times the four backend kernels at representative training shapes, plus
one full conv2d forward+backward through whichever backend is selected
by RESATTN_KERNELS.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from resattn import kernels, ops
from resattn.kernels import get_backend
from resattn.tensor import Tensor

SHAPES = [
    # (name, x shape, kernel, stride, pad)
    ("stage1 3x3", (64, 16, 32, 32), 3, 1, 1),
    ("stage2 3x3", (64, 32, 16, 16), 3, 1, 1),
    ("1x1 wide", (64, 64, 32, 32), 1, 1, 0),
]
POOLS = [
    ("pool w2 s2", (64, 64, 32, 32), 2, 2, 0),
    ("pool w3 s2 p1", (8, 64, 56, 56), 3, 2, 1),
]


def timeit(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    backends = [get_backend("numpy")]
    try:
        backends.append(get_backend("cython"))
    except ImportError:
        print("compiled core not built; benchmarking numpy only")
    rng = np.random.default_rng(0)

    header = f"{'kernel':34s}" + "".join(f"{b.BACKEND:>12s}" for b in backends)
    print(header + ("     speedup" if len(backends) == 2 else ""))
    print("-" * len(header))

    def row(name, fns):
        times = [timeit(fn, args.repeats) for fn in fns]
        line = f"{name:34s}" + "".join(f"{t:10.2f}ms" for t in times)
        if len(times) == 2 and times[1] > 0:
            line += f"  {times[0] / times[1]:9.2f}x"
        print(line)

    for name, shape, k, s, p in SHAPES:
        x = rng.standard_normal(shape).astype(np.float32)
        n, c, h, w = shape
        cols = backends[0].im2col(x, k, k, s, p)
        row(f"im2col {name} {shape}", [
            (lambda b=b: b.im2col(x, k, k, s, p)) for b in backends
        ])
        row(f"col2im {name}", [
            (lambda b=b: b.col2im(cols, n, c, h, w, k, k, s, p)) for b in backends
        ])

    for name, shape, w_, s, p in POOLS:
        x = rng.standard_normal(shape).astype(np.float32)
        _, idx = backends[0].maxpool_forward(x, w_, s, p)
        g = rng.standard_normal(idx.shape).astype(np.float32)
        row(f"maxpool_fwd {name} {shape}", [
            (lambda b=b: b.maxpool_forward(x, w_, s, p)) for b in backends
        ])
        row(f"maxpool_bwd {name}", [
            (lambda b=b: b.maxpool_backward(g, idx, shape[2], shape[3])) for b in backends
        ])

    # end-to-end conv through the active backend
    print(f"\nactive backend for resattn.ops: {kernels.BACKEND}")
    x = Tensor(rng.standard_normal((64, 16, 32, 32)).astype(np.float32),
               requires_grad=True)
    w = Tensor(rng.standard_normal((64, 16, 3, 3)).astype(np.float32) * 0.05,
               requires_grad=True)

    def conv_fwd_bwd():
        y = ops.conv2d(x, w, 1, 1)
        loss = ops.tensor_sum(ops.mul(y, y))
        loss.backward()
        x.grad = None
        w.grad = None

    print(f"conv2d fwd+bwd (64,16,32,32)->64ch: {timeit(conv_fwd_bwd, args.repeats):.2f}ms")


if __name__ == "__main__":
    main()
