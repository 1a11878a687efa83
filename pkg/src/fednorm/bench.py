"""Benchmark: compiled convolution kernels against the NumPy im2col
fallback on the CNN's two conv shapes, forward and backward."""

import time

import numpy as np

from .kernels import conv_numpy

try:
    from .kernels import _convcore
except ImportError:
    _convcore = None


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(sizes=64, repeats=5):
    rng = np.random.default_rng(0)
    cases = [
        ("conv 3->6 on 32x32", (sizes, 3, 32, 32), (6, 3, 5, 5)),
        ("conv 6->16 on 28x28", (sizes, 6, 28, 28), (16, 6, 5, 5)),
    ]
    backends = [("numpy", conv_numpy)]
    if _convcore is not None:
        backends.append(("compiled", _convcore))
    else:
        print("compiled extension unavailable; benchmarking numpy only")

    header = f"{'case':<28}{'pass':<10}" + "".join(f"{n:>12}" for n, _ in backends)
    print(header)
    for label, xshape, kshape in cases:
        x = np.ascontiguousarray(rng.standard_normal(xshape))
        k = np.ascontiguousarray(rng.standard_normal(kshape))
        h_out = xshape[2] - kshape[2] + 1
        w_out = xshape[3] - kshape[3] + 1
        dy = np.ascontiguousarray(rng.standard_normal((xshape[0], kshape[0], h_out, w_out)))
        rows = {
            "forward": lambda mod: mod.conv2d_forward(x, k, 0),
            "grad_in": lambda mod: mod.conv2d_backward_input(dy, k, 0, xshape[2], xshape[3]),
            "grad_k": lambda mod: mod.conv2d_backward_kernel(dy, x, 0, kshape[2], kshape[3]),
        }
        for pass_name, call in rows.items():
            line = f"{label:<28}{pass_name:<10}"
            for _, mod in backends:
                secs = _time(lambda: call(mod), repeats)
                line += f"{secs * 1e3:>10.2f}ms"
            print(line)


if __name__ == "__main__":
    run()
