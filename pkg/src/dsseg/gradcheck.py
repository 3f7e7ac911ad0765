"""Finite-difference verification of every analytic backward pass.

Checks run in 64-bit with central differences (h = 1e-5) on seeded random
inputs.  A failed check is reported, never raised.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn_ops
from .tensor import Tensor, concat

FD_STEP = 1e-5


@dataclass
class CheckReport:
    op: str
    max_rel_err: float
    tol: float
    passed: bool

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"{self.op:<28s} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} {status}"


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = 1e-6 * (1.0 + float(np.max(np.abs(numeric), initial=0.0)))
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + scale),
                        initial=0.0))


def finite_diff(f: Callable[[Sequence[np.ndarray]], float],
                arrays: Sequence[np.ndarray], h: float = FD_STEP):
    """Central-difference gradient of a scalar function of several arrays."""
    grads = []
    for i, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(arrays)
            flat[j] = orig - h
            fm = f(arrays)
            flat[j] = orig
            gf[j] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def check_function(name: str, forward: Callable[[Sequence[Tensor]], Tensor],
                   arrays: Sequence[np.ndarray], tol: float = 1e-4) -> CheckReport:
    """Compare backward() of `forward` against finite differences.

    `arrays` must be float64; `forward` maps matching Tensors to a scalar.
    """
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64)
               for a in arrays]
    loss = forward(tensors)
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.values)
                for t in tensors]

    def scalar_f(arrs):
        ts = [Tensor(a, dtype=np.float64) for a in arrs]
        return forward(ts).item()

    numeric = finite_diff(scalar_f, [a.copy() for a in arrays])
    err = max((_rel_err(a, n) for a, n in zip(analytic, numeric)), default=0.0)
    return CheckReport(name, err, tol, err < tol)


def _projected(out: Tensor, rng: np.random.Generator) -> Tensor:
    # random fixed projection so the check covers the full Jacobian
    proj = Tensor(rng.standard_normal(out.shape).astype(np.float64))
    return (out * proj).sum()


def grad_check(op_kind: str, seed: int = 0, tol: float = 1e-4) -> CheckReport:
    """Run the finite-difference check for one primitive."""
    rng = np.random.default_rng(seed)
    prng = np.random.default_rng(seed + 1)

    if op_kind == "elementwise":
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))

        def fwd(ts):
            x, y = ts
            z = (x * y + x).relu() * 0.5 + (x * x).mean() - y.sum() / 7.0
            z = z + (x * x + 0.5).log().sum() + concat([x, y], axis=0).sum()
            return _projected(z, np.random.default_rng(seed + 2)) \
                if z.size > 1 else z

        return check_function("elementwise", fwd, [a, b], tol)

    if op_kind == "conv3d":
        x = rng.standard_normal((1, 4, 4, 4))
        k = rng.standard_normal((2, 1, 3, 3, 3))
        b = rng.standard_normal(2)
        return check_function(
            "conv3d",
            lambda ts: _projected(nn_ops.conv3d(ts[0], ts[1], ts[2],
                                                stride=1, padding=1),
                                  np.random.default_rng(seed + 2)),
            [x, k, b], tol)

    if op_kind == "conv_transpose3d":
        x = rng.standard_normal((2, 3, 3, 3))
        k = rng.standard_normal((2, 1, 2, 2, 2))
        b = rng.standard_normal(1)
        return check_function(
            "conv_transpose3d",
            lambda ts: _projected(nn_ops.conv_transpose3d(ts[0], ts[1], ts[2],
                                                          stride=2),
                                  np.random.default_rng(seed + 2)),
            [x, k, b], tol)

    if op_kind == "maxpool3d":
        x = rng.standard_normal((1, 4, 4, 4))
        return check_function(
            "maxpool3d",
            lambda ts: _projected(nn_ops.maxpool3d(ts[0]),
                                  np.random.default_rng(seed + 2)),
            [x], tol)

    if op_kind == "dense":
        x = rng.standard_normal(5)
        w = rng.standard_normal((3, 5))
        b = rng.standard_normal(3)
        return check_function(
            "dense",
            lambda ts: _projected(nn_ops.dense(ts[0], ts[1], ts[2]),
                                  np.random.default_rng(seed + 2)),
            [x, w, b], tol)

    if op_kind == "softmax":
        x = rng.standard_normal((3, 4))
        return check_function(
            "softmax",
            lambda ts: _projected(nn_ops.softmax(ts[0], axis=0),
                                  np.random.default_rng(seed + 2)),
            [x], tol)

    if op_kind == "softmax_xent":
        x = rng.standard_normal(6)
        target = prng.integers(6)

        def fwd(ts):
            p = nn_ops.softmax(ts[0], axis=0)
            return -p[int(target)].clamp(1e-12, 1.0).log()

        return check_function("softmax_xent", fwd, [x], tol=min(tol, 1e-5))

    raise ValueError(f"unknown op kind: {op_kind}")


ALL_OPS = ("elementwise", "conv3d", "conv_transpose3d", "maxpool3d",
           "dense", "softmax", "softmax_xent")


def run_all(seed: int = 0, tol: float = 1e-4):
    return [grad_check(op, seed=seed, tol=tol) for op in ALL_OPS]
