# cython: language_level=3
"""Compiled hot loops: patch extraction/scatter for convolutions and
half-pixel bilinear resampling. Mirrors ``_pykernels`` exactly in contract."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor

cnp.import_array()


def im2col(floating[:, :, :, ::1] xp, int k, int stride, int ho, int wo):
    """(N, C, Hp, Wp) padded input -> (N*Ho*Wo, C*k*k) patch matrix."""
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t ckk = c * k * k
    dtype = np.float32 if floating is float else np.float64
    cols_arr = np.empty((n * ho * wo, ckk), dtype=dtype)
    cdef floating[:, ::1] cols = cols_arr
    cdef Py_ssize_t b, y, x, ch, i, j, row, col, y0, x0
    with nogil:
        for b in range(n):
            for y in range(ho):
                y0 = y * stride
                for x in range(wo):
                    x0 = x * stride
                    row = (b * ho + y) * wo + x
                    col = 0
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                cols[row, col] = xp[b, ch, y0 + i, x0 + j]
                                col += 1
    return cols_arr


def col2im(floating[:, ::1] cols, shape, int k, int stride, int ho, int wo):
    """Scatter-add a patch matrix back onto a zeroed (N, C, Hp, Wp) array."""
    cdef Py_ssize_t n = shape[0], c = shape[1]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros(tuple(shape), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, ch, i, j, row, col, y0, x0
    with nogil:
        for b in range(n):
            for y in range(ho):
                y0 = y * stride
                for x in range(wo):
                    x0 = x * stride
                    row = (b * ho + y) * wo + x
                    col = 0
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                out[b, ch, y0 + i, x0 + j] += cols[row, col]
                                col += 1
    return out_arr


cdef void _taps(Py_ssize_t size_in, Py_ssize_t size_out,
                Py_ssize_t[::1] lo, Py_ssize_t[::1] hi,
                double[::1] wlo, double[::1] whi) noexcept nogil:
    cdef double scale = <double>size_in / <double>size_out
    cdef double src
    cdef Py_ssize_t d, i0
    for d in range(size_out):
        src = (d + 0.5) * scale - 0.5
        if src < 0.0:
            src = 0.0
        i0 = <Py_ssize_t>floor(src)
        if i0 > size_in - 1:
            i0 = size_in - 1
        lo[d] = i0
        hi[d] = i0 + 1 if i0 < size_in - 1 else i0
        whi[d] = src - i0
        wlo[d] = 1.0 - whi[d]


def _tap_arrays(Py_ssize_t size_in, Py_ssize_t size_out):
    lo = np.empty(size_out, dtype=np.intp)
    hi = np.empty(size_out, dtype=np.intp)
    wlo = np.empty(size_out, dtype=np.float64)
    whi = np.empty(size_out, dtype=np.float64)
    _taps(size_in, size_out, lo, hi, wlo, whi)
    return lo, hi, wlo, whi


def resize_forward(floating[:, :, :, ::1] x, int out_h, int out_w):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, out_h, out_w), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    ylo_a, yhi_a, wylo_a, wyhi_a = _tap_arrays(h, out_h)
    xlo_a, xhi_a, wxlo_a, wxhi_a = _tap_arrays(w, out_w)
    cdef Py_ssize_t[::1] ylo = ylo_a, yhi = yhi_a, xlo = xlo_a, xhi = xhi_a
    cdef double[::1] wylo = wylo_a, wyhi = wyhi_a, wxlo = wxlo_a, wxhi = wxhi_a
    cdef Py_ssize_t b, ch, oy, ox
    cdef double top, bot
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(out_h):
                    for ox in range(out_w):
                        top = (wxlo[ox] * x[b, ch, ylo[oy], xlo[ox]]
                               + wxhi[ox] * x[b, ch, ylo[oy], xhi[ox]])
                        bot = (wxlo[ox] * x[b, ch, yhi[oy], xlo[ox]]
                               + wxhi[ox] * x[b, ch, yhi[oy], xhi[ox]])
                        out[b, ch, oy, ox] = <floating>(wylo[oy] * top + wyhi[oy] * bot)
    return out_arr


def resize_backward(floating[:, :, :, ::1] g, int in_h, int in_w):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], out_h = g.shape[2], out_w = g.shape[3]
    dtype = np.float32 if floating is float else np.float64
    acc_arr = np.zeros((n, c, in_h, in_w), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_arr
    ylo_a, yhi_a, wylo_a, wyhi_a = _tap_arrays(in_h, out_h)
    xlo_a, xhi_a, wxlo_a, wxhi_a = _tap_arrays(in_w, out_w)
    cdef Py_ssize_t[::1] ylo = ylo_a, yhi = yhi_a, xlo = xlo_a, xhi = xhi_a
    cdef double[::1] wylo = wylo_a, wyhi = wyhi_a, wxlo = wxlo_a, wxhi = wxhi_a
    cdef Py_ssize_t b, ch, oy, ox
    cdef double v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(out_h):
                    for ox in range(out_w):
                        v = g[b, ch, oy, ox]
                        acc[b, ch, ylo[oy], xlo[ox]] += wylo[oy] * wxlo[ox] * v
                        acc[b, ch, ylo[oy], xhi[ox]] += wylo[oy] * wxhi[ox] * v
                        acc[b, ch, yhi[oy], xlo[ox]] += wyhi[oy] * wxlo[ox] * v
                        acc[b, ch, yhi[oy], xhi[ox]] += wyhi[oy] * wxhi[ox] * v
    return acc_arr.astype(dtype, copy=False)


def conv_direct_forward(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w, int ho, int wo):
    """Stride-1 convolution without a patch matrix; fast when Cout is small."""
    cdef Py_ssize_t n = xp.shape[0], cin = xp.shape[1], cout = w.shape[0], k = w.shape[2]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, cout, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, c, i, j, y, x
    cdef floating wv
    cdef floating* orow
    cdef floating* xrow
    with nogil:
        for b in range(n):
            for o in range(cout):
                for c in range(cin):
                    for i in range(k):
                        for j in range(k):
                            wv = w[o, c, i, j]
                            for y in range(ho):
                                orow = &out[b, o, y, 0]
                                xrow = &xp[b, c, y + i, j]
                                for x in range(wo):
                                    orow[x] += wv * xrow[x]
    return out_arr


def conv_direct_backward_input(floating[:, :, :, ::1] g, floating[:, :, :, ::1] w, shape):
    """Gradient w.r.t. the padded input of ``conv_direct_forward``."""
    cdef Py_ssize_t n = g.shape[0], cout = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t cin = w.shape[1], k = w.shape[2]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros(tuple(shape), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, o, c, i, j, y, x
    cdef floating wv
    cdef floating* drow
    cdef floating* grow
    with nogil:
        for b in range(n):
            for c in range(cin):
                for o in range(cout):
                    for i in range(k):
                        for j in range(k):
                            wv = w[o, c, i, j]
                            for y in range(ho):
                                drow = &dx[b, c, y + i, j]
                                grow = &g[b, o, y, 0]
                                for x in range(wo):
                                    drow[x] += wv * grow[x]
    return dx_arr


def conv_direct_backward_weight(floating[:, :, :, ::1] g, floating[:, :, :, ::1] xp, int k):
    """Gradient w.r.t. the weight of ``conv_direct_forward``."""
    cdef Py_ssize_t n = g.shape[0], cout = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t cin = xp.shape[1]
    dtype = np.float32 if floating is float else np.float64
    dw_arr = np.zeros((cout, cin, k, k), dtype=dtype)
    lanes_arr = np.zeros(wo, dtype=dtype)
    cdef floating[:, :, :, ::1] dw = dw_arr
    cdef floating[::1] lanes = lanes_arr
    cdef Py_ssize_t b, o, c, i, j, y, x
    cdef floating* grow
    cdef floating* xrow
    cdef double total
    with nogil:
        for o in range(cout):
            for c in range(cin):
                for i in range(k):
                    for j in range(k):
                        # elementwise lane accumulation vectorizes; the horizontal sum is done once
                        for x in range(wo):
                            lanes[x] = 0
                        for b in range(n):
                            for y in range(ho):
                                grow = &g[b, o, y, 0]
                                xrow = &xp[b, c, y + i, j]
                                for x in range(wo):
                                    lanes[x] += grow[x] * xrow[x]
                        total = 0.0
                        for x in range(wo):
                            total += lanes[x]
                        dw[o, c, i, j] = <floating>total
    return dw_arr
