"""Pure-numpy fallback kernels for 3D patch lowering.

im2col / col2im are the hot inner loops of conv3d and conv_transpose3d.
The fallback loops over the k^3 kernel offsets and lets numpy slicing do
the per-offset copy, which keeps the python-level loop at k^3 iterations.
"""

import numpy as np

BACKEND = "numpy"


def im2col3d(x, k, stride):
    """Lower a padded volume [C, D, H, W] to columns [C*k^3, L].

    L = Do*Ho*Wo where Do = (D - k)//stride + 1 etc.  Column order is
    (channel, dz, dy, dx) fastest-last, position index in z,y,x scan order.
    """
    c, d, h, w = x.shape
    do = (d - k) // stride + 1
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols = np.empty((c, k, k, k, do, ho, wo), dtype=x.dtype)
    for dz in range(k):
        ze = dz + stride * (do - 1) + 1
        for dy in range(k):
            ye = dy + stride * (ho - 1) + 1
            for dx in range(k):
                xe = dx + stride * (wo - 1) + 1
                cols[:, dz, dy, dx] = x[:, dz:ze:stride, dy:ye:stride, dx:xe:stride]
    return cols.reshape(c * k * k * k, do * ho * wo)


def col2im3d(cols, c, d, h, w, k, stride):
    """Adjoint of im2col3d: scatter-add columns back into a [C, D, H, W] volume."""
    do = (d - k) // stride + 1
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols = cols.reshape(c, k, k, k, do, ho, wo)
    out = np.zeros((c, d, h, w), dtype=cols.dtype)
    for dz in range(k):
        ze = dz + stride * (do - 1) + 1
        for dy in range(k):
            ye = dy + stride * (ho - 1) + 1
            for dx in range(k):
                xe = dx + stride * (wo - 1) + 1
                out[:, dz:ze:stride, dy:ye:stride, dx:xe:stride] += cols[:, dz, dy, dx]
    return out
