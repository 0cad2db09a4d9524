"""NumPy implementations of the hot kernels.

Used when the compiled ``_ckernels`` module is unavailable or when
``PAANET_BACKEND=python`` is set. Same signatures, same results up to
float rounding.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # N, Ho, Wo, C, k, k -> rows are output sites, columns are (channel, ky, kx)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def col2im(cols, shape, k, stride, ho, wo):
    n, c = shape[:2]
    out = np.zeros(tuple(shape), dtype=cols.dtype)
    patches = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += patches[:, :, i, j]
    return out


def _taps(size_in, size_out):
    src = (np.arange(size_out, dtype=np.float64) + 0.5) * (size_in / size_out) - 0.5
    src = np.maximum(src, 0.0)
    lo = np.minimum(np.floor(src).astype(np.intp), size_in - 1)
    hi = np.where(lo < size_in - 1, lo + 1, lo)
    whi = src - lo
    return lo, hi, 1.0 - whi, whi


def interp_matrix(size_in, size_out):
    """Dense (size_out, size_in) half-pixel bilinear interpolation matrix."""
    lo, hi, wlo, whi = _taps(size_in, size_out)
    m = np.zeros((size_out, size_in), dtype=np.float64)
    rows = np.arange(size_out)
    np.add.at(m, (rows, lo), wlo)
    np.add.at(m, (rows, hi), whi)
    return m


def resize_forward(x, out_h, out_w):
    ry = interp_matrix(x.shape[2], out_h)
    rx = interp_matrix(x.shape[3], out_w)
    out = ry @ x.astype(np.float64) @ rx.T
    return out.astype(x.dtype)


def resize_backward(g, in_h, in_w):
    ry = interp_matrix(in_h, g.shape[2])
    rx = interp_matrix(in_w, g.shape[3])
    out = ry.T @ g.astype(np.float64) @ rx
    return out.astype(g.dtype)


def conv_direct_forward(xp, w, ho, wo):
    n = xp.shape[0]
    cout, _, k, _ = w.shape
    out = np.zeros((cout, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += np.tensordot(w[:, :, i, j], xp[:, :, i : i + ho, j : j + wo], axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv_direct_backward_input(g, w, shape):
    ho, wo = g.shape[2:]
    k = w.shape[2]
    dx = np.zeros(tuple(shape), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            # (Cin, N, Ho, Wo) contribution of tap (i, j)
            part = np.tensordot(w[:, :, i, j], g, axes=([0], [1]))
            dx[:, :, i : i + ho, j : j + wo] += part.transpose(1, 0, 2, 3)
    return dx


def conv_direct_backward_weight(g, xp, k):
    ho, wo = g.shape[2:]
    dw = np.zeros((g.shape[1], xp.shape[1], k, k), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dw[:, :, i, j] = np.tensordot(g, xp[:, :, i : i + ho, j : j + wo], axes=([0, 2, 3], [0, 2, 3]))
    return dw
