"""Compare the compiled im2col/col2im kernels against the numpy fallback.

Run:  python bench/bench_kernels.py
"""

import time

import numpy as np

from dsseg import _kernels_py

try:
    from dsseg import _kernels
except ImportError:
    _kernels = None


def bench(impl, reps=5):
    rng = np.random.default_rng(0)
    x = np.ascontiguousarray(rng.standard_normal((8, 66, 66, 66)),
                             dtype=np.float32)
    k, stride = 3, 1
    cols = impl.im2col3d(x, k, stride)
    t0 = time.perf_counter()
    for _ in range(reps):
        cols = impl.im2col3d(x, k, stride)
    t_im2col = (time.perf_counter() - t0) / reps
    t0 = time.perf_counter()
    for _ in range(reps):
        impl.col2im3d(cols, 8, 66, 66, 66, k, stride)
    t_col2im = (time.perf_counter() - t0) / reps
    return t_im2col, t_col2im


def bench_conv(reps=3):
    from dsseg import nn_ops
    from dsseg.tensor import Tensor
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 64, 64, 64)).astype(np.float32),
               requires_grad=True)
    w = Tensor(rng.standard_normal((8, 4, 3, 3, 3)).astype(np.float32),
               requires_grad=True)
    b = Tensor(np.zeros(8, dtype=np.float32), requires_grad=True)
    t0 = time.perf_counter()
    for _ in range(reps):
        out = nn_ops.conv3d(x, w, b, padding=1)
        out.sum().backward()
        x.grad = w.grad = b.grad = None
    return (time.perf_counter() - t0) / reps


def main():
    print(f"{'kernel':<12} {'im2col':>10} {'col2im':>10}")
    t_py = bench(_kernels_py)
    print(f"{'numpy':<12} {t_py[0] * 1e3:9.2f}ms {t_py[1] * 1e3:9.2f}ms")
    if _kernels is not None:
        t_cy = bench(_kernels)
        print(f"{'cython':<12} {t_cy[0] * 1e3:9.2f}ms {t_cy[1] * 1e3:9.2f}ms")
        print(f"speedup im2col x{t_py[0] / t_cy[0]:.2f}, "
              f"col2im x{t_py[1] / t_cy[1]:.2f}")
    else:
        print("cython extension not built; run pip install -e . first")
    print(f"conv3d 64^3 fwd+bwd (selected backend): {bench_conv() * 1e3:.1f}ms")


if __name__ == "__main__":
    main()
