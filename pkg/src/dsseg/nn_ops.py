"""Structured network primitives: 3D conv / transposed conv / maxpool,
dense layers, softmax and dropout.

Convolutions are lowered to matrix products via im2col (see `kernels`).
The column matrix is recomputed during backward instead of being kept
alive in the graph, which caps activation memory at the raw feature maps.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .kernels import col2im3d, im2col3d
from .tensor import ShapeError, Tensor


def _conv_out_extent(ext, k, stride, padding):
    num = ext + 2 * padding - k
    if num % stride != 0 or num < 0:
        raise ShapeError(
            f"conv3d: extent {ext} with kernel {k}, stride {stride}, "
            f"padding {padding} gives non-integral output size"
        )
    return num // stride + 1


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of [C_in, D, H, W] with [C_out, C_in, k, k, k]."""
    co, ci, k, k2, k3 = kernel.shape
    if k != k2 or k != k3:
        raise ShapeError(f"conv3d: kernel must be cubic, got {kernel.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv3d: kernel extent must be odd, got {k}")
    if stride < 1:
        raise ShapeError(f"conv3d: stride must be >= 1, got {stride}")
    if x.shape[0] != ci:
        raise ShapeError(
            f"conv3d: input has {x.shape[0]} channels, kernel expects {ci}")
    if bias.shape != (co,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({co},)")

    _, d, h, w = x.shape
    do = _conv_out_extent(d, k, stride, padding)
    ho = _conv_out_extent(h, k, stride, padding)
    wo = _conv_out_extent(w, k, stride, padding)
    p = padding
    xp = np.pad(x.values, ((0, 0), (p, p), (p, p), (p, p))) if p else x.values
    xp = np.ascontiguousarray(xp)
    cols = im2col3d(xp, k, stride)
    wm = kernel.values.reshape(co, ci * k ** 3)
    out = (wm @ cols) + bias.values[:, None]
    out = out.reshape(co, do, ho, wo)

    def bwd(g):
        dmat = g.reshape(co, -1)
        db = dmat.sum(axis=1)
        cols_b = im2col3d(xp, k, stride)
        dw = (dmat @ cols_b.T).reshape(kernel.shape)
        dcols = np.ascontiguousarray(wm.T @ dmat)
        dxp = col2im3d(dcols, ci, *xp.shape[1:], k, stride)
        dx = dxp[:, p:p + d, p:p + h, p:p + w] if p else dxp
        return np.ascontiguousarray(dx), dw, db

    return Tensor._make(out, "conv3d", (x, kernel, bias), bwd,
                        {"stride": stride, "padding": padding})


def conv_transpose3d(x: Tensor, kernel: Tensor, bias: Tensor,
                     stride: int = 1) -> Tensor:
    """Transposed convolution; kernel is [C_in, C_out, k, k, k].

    Output spatial extent is (in - 1) * stride + k.
    """
    ci, co, k, k2, k3 = kernel.shape
    if k != k2 or k != k3:
        raise ShapeError(f"conv_transpose3d: kernel must be cubic, got {kernel.shape}")
    if stride < 1:
        raise ShapeError(f"conv_transpose3d: stride must be >= 1, got {stride}")
    if x.shape[0] != ci:
        raise ShapeError(
            f"conv_transpose3d: input has {x.shape[0]} channels, "
            f"kernel expects {ci}")
    if bias.shape != (co,):
        raise ShapeError(f"conv_transpose3d: bias shape {bias.shape} != ({co},)")

    _, d, h, w = x.shape
    do = (d - 1) * stride + k
    ho = (h - 1) * stride + k
    wo = (w - 1) * stride + k
    wm = kernel.values.reshape(ci, co * k ** 3)
    xmat = x.values.reshape(ci, d * h * w)
    cols = np.ascontiguousarray(wm.T @ xmat)
    out = col2im3d(cols, co, do, ho, wo, k, stride)
    out = out + bias.values[:, None, None, None]

    def bwd(g):
        db = g.sum(axis=(1, 2, 3))
        gc = np.ascontiguousarray(g)
        dcols = im2col3d(gc, k, stride)  # [co*k^3, d*h*w]
        dx = (wm @ dcols).reshape(x.shape)
        dw = (xmat @ dcols.T).reshape(kernel.shape)
        return dx, dw, db

    return Tensor._make(out, "conv_transpose3d", (x, kernel, bias), bwd,
                        {"stride": stride})


def maxpool3d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Per-window maximum; ties route the gradient to the first voxel in
    (z, y, x) scan order."""
    c, d, h, w = x.shape
    for ext in (d, h, w):
        if ext < window or (ext - window) % stride != 0:
            raise ShapeError(
                f"maxpool3d: extent {ext} not divisible for window {window}, "
                f"stride {stride}")
    win = sliding_window_view(x.values, (window,) * 3, axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    co, do, ho, wo = win.shape[:4]
    flat = win.reshape(c, do, ho, wo, window ** 3)
    arg = np.argmax(flat, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def bwd(g):
        gx = np.zeros_like(x.values)
        dz, dy, dx_ = np.unravel_index(arg, (window,) * 3)
        ci, zi, yi, xi = np.indices(arg.shape)
        np.add.at(gx, (ci, zi * stride + dz, yi * stride + dy,
                       xi * stride + dx_), g)
        return (gx,)

    return Tensor._make(out, "maxpool3d", (x,), bwd,
                        {"window": window, "stride": stride})


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map W @ x + b for a vector input."""
    n, m = weights.shape
    if x.shape != (m,):
        raise ShapeError(f"dense: input shape {x.shape} != ({m},)")
    if bias.shape != (n,):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({n},)")
    out = weights.values @ x.values + bias.values

    def bwd(g):
        return weights.values.T @ g, np.outer(g, x.values), g

    return Tensor._make(out, "dense", (x, weights, bias), bwd)


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    if not -x.values.ndim <= axis < x.values.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return Tensor._make(y, "softmax", (x,), bwd, {"axis": axis})


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.values.dtype)
    scale = 1.0 / (1.0 - rate)
    mask = Tensor(keep * scale)
    return x * mask


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pool of [C, D, H, W] to [C]."""
    return x.mean(axis=(1, 2, 3))
