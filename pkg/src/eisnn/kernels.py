"""Kernel dispatch: compiled extension when built, numpy fallback otherwise.

Set ``EISNN_PURE_PYTHON=1`` before import to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("EISNN_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _c(a):
    return np.ascontiguousarray(a)


def im2col(x, k, pad):
    return _impl.im2col(_c(x), int(k), int(pad))


def col2im(cols, x_shape, k, pad):
    return _impl.col2im(_c(cols), tuple(int(s) for s in x_shape), int(k), int(pad))


def avg_pool2(x):
    return _impl.avg_pool2(_c(x))


def avg_pool2_backward(g):
    return _impl.avg_pool2_backward(_c(g))


def zero_replace_rows(x, fallback):
    return _impl.zero_replace_rows(_c(x), float(fallback))


def arctan_surrogate_grad(v, g, alpha):
    shape = v.shape
    g = np.asarray(g, dtype=v.dtype)
    out = _impl.arctan_surrogate_grad(_c(v).reshape(-1), _c(g).reshape(-1), float(alpha))
    return out.reshape(shape)
