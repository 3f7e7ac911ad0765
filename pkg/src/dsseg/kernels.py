"""Backend selection: compiled Cython kernels when built, numpy fallback otherwise.

Set DSSEG_PURE=1 to force the fallback (used by the benchmark).
"""

import os

from . import _kernels_py

if os.environ.get("DSSEG_PURE") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND


def im2col3d(x, k, stride):
    return _impl.im2col3d(x, k, stride)


def col2im3d(cols, c, d, h, w, k, stride):
    return _impl.col2im3d(cols, c, d, h, w, k, stride)
