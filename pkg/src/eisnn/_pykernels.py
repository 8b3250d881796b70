"""Pure-numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_ckernels`` module; used when
the extension is unavailable or ``EISNN_PURE_PYTHON=1``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, pad):
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B, C, Ho, Wo, k, k
    Ho, Wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)


def col2im(cols, x_shape, k, pad):
    B, C, H, W = x_shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = Hp - k + 1, Wp - k + 1
    c = cols.reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + Ho, j:j + Wo] += c[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out)


def avg_pool2(x):
    B, C, H, W = x.shape
    return x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(g):
    g = g * 0.25
    return np.ascontiguousarray(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3))


def zero_replace_rows(x, fallback):
    """Replace zeros in each row by that row's smallest positive entry.

    Rows with no positive entry are filled with ``fallback``. Returns the new
    array and the number of such rows.
    """
    zero = x == 0
    if not zero.any():
        return x.copy(), 0
    tmp = np.where(zero, np.inf, x)
    row_min = tmp.min(axis=1)
    empty = ~np.isfinite(row_min)
    row_min[empty] = fallback
    out = np.where(zero, row_min[:, None], x).astype(x.dtype, copy=False)
    return out, int(empty.sum())


def arctan_surrogate_grad(v, g, alpha):
    """``g * alpha/2 / (1 + (pi*alpha*v/2)^2)`` elementwise."""
    a = np.pi * alpha / 2
    return g * (alpha / 2) / (1 + (a * v) ** 2)
