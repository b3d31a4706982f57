# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.  Signatures mirror ``_numpy_impl``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline void _valid_range(Py_ssize_t wo, Py_ssize_t w, int sw, Py_ssize_t off,
                              Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns ox with 0 <= ox*sw + off < w
    cdef Py_ssize_t a = 0, b = wo
    while a < wo and a * sw + off < 0:
        a += 1
    while b > a and (b - 1) * sw + off >= w:
        b -= 1
    lo[0] = a
    hi[0] = b


cdef void _im2col(const real[:, :, :, ::1] x, real[:, ::1] cols,
                  int kh, int kw, int sh, int sw, int ph, int pw,
                  int ho, int wo) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ci, i, j, b, oy, ox, iy, row, col, lo, hi, off
    cdef real* dst
    cdef const real* src
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                off = j - pw
                _valid_range(wo, w, sw, off, &lo, &hi)
                col = 0
                for b in range(n):
                    for oy in range(ho):
                        dst = &cols[row, col]
                        col += wo
                        iy = oy * sh + i - ph
                        if iy < 0 or iy >= h:
                            for ox in range(wo):
                                dst[ox] = 0
                            continue
                        src = &x[b, ci, iy, 0]
                        for ox in range(lo):
                            dst[ox] = 0
                        if sw == 1:
                            for ox in range(lo, hi):
                                dst[ox] = src[ox + off]
                        else:
                            for ox in range(lo, hi):
                                dst[ox] = src[ox * sw + off]
                        for ox in range(hi, wo):
                            dst[ox] = 0


cdef void _col2im(const real[:, ::1] cols, real[:, :, :, ::1] dx,
                  int kh, int kw, int sh, int sw, int ph, int pw,
                  int ho, int wo) noexcept nogil:
    cdef Py_ssize_t n = dx.shape[0], c = dx.shape[1], h = dx.shape[2], w = dx.shape[3]
    cdef Py_ssize_t ci, i, j, b, oy, ox, iy, row, col, lo, hi, off
    cdef real* dst
    cdef const real* src
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                off = j - pw
                _valid_range(wo, w, sw, off, &lo, &hi)
                col = 0
                for b in range(n):
                    for oy in range(ho):
                        src = &cols[row, col]
                        col += wo
                        iy = oy * sh + i - ph
                        if iy < 0 or iy >= h:
                            continue
                        dst = &dx[b, ci, iy, 0]
                        if sw == 1:
                            for ox in range(lo, hi):
                                dst[ox + off] += src[ox]
                        else:
                            for ox in range(lo, hi):
                                dst[ox * sw + off] += src[ox]


def im2col(x, int kh, int kw, int sh, int sw, int ph, int pw, int ho, int wo):
    n, c = x.shape[0], x.shape[1]
    cols = np.empty((c * kh * kw, n * ho * wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, kh, kw, sh, sw, ph, pw, ho, wo)
    else:
        _im2col[double](x, cols, kh, kw, sh, sw, ph, pw, ho, wo)
    return cols


def col2im(cols, x_shape, int kh, int kw, int sh, int sw, int ph, int pw, int ho, int wo):
    cols = np.ascontiguousarray(cols)
    dx = np.zeros(x_shape, dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, dx, kh, kw, sh, sw, ph, pw, ho, wo)
    else:
        _col2im[double](cols, dx, kh, kw, sh, sw, ph, pw, ho, wo)
    return dx


cdef void _maxpool_fwd(const real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                       long long[:, :, :, ::1] arg, int kh, int kw, int sh, int sw,
                       int ph, int pw) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t b, ci, oy, ox, i, j, iy, ix
    cdef long long best_i
    cdef real best, v
    for b in range(n):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = -INFINITY
                    best_i = -1
                    for i in range(kh):
                        iy = oy * sh + i - ph
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(kw):
                            ix = ox * sw + j - pw
                            if ix < 0 or ix >= w:
                                continue
                            v = x[b, ci, iy, ix]
                            if v > best or best_i < 0:
                                best = v
                                best_i = iy * w + ix
                    out[b, ci, oy, ox] = best
                    arg[b, ci, oy, ox] = best_i


cdef void _maxpool_bwd(const real[:, :, :, ::1] g, const long long[:, :, :, ::1] arg,
                       real[:, :, ::1] dx) noexcept nogil:
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t b, ci, oy, ox
    for b in range(n):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    dx[b * c + ci, 0, arg[b, ci, oy, ox]] += g[b, ci, oy, ox]


def maxpool_forward(x, int kh, int kw, int sh, int sw, int ph, int pw, int ho, int wo):
    n, c = x.shape[0], x.shape[1]
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    if x.dtype == np.float32:
        _maxpool_fwd[float](x, out, arg, kh, kw, sh, sw, ph, pw)
    else:
        _maxpool_fwd[double](x, out, arg, kh, kw, sh, sw, ph, pw)
    return out, arg


def maxpool_backward(grad, argidx, x_shape):
    n, c, h, w = x_shape
    grad = np.ascontiguousarray(grad)
    dx = np.zeros((n * c, 1, h * w), dtype=grad.dtype)
    if grad.dtype == np.float32:
        _maxpool_bwd[float](grad, argidx, dx)
    else:
        _maxpool_bwd[double](grad, argidx, dx)
    return dx.reshape(x_shape)


cdef void _nearest(const real[:, :, :, ::1] x, real[:, :, :, ::1] y, int fh, int fw) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ci, iy, ix, k, r, wf = w * fw
    cdef real v
    cdef real* dst
    for b in range(n):
        for ci in range(c):
            for iy in range(h):
                dst = &y[b, ci, iy * fh, 0]
                for ix in range(w):
                    v = x[b, ci, iy, ix]
                    for k in range(fw):
                        dst[ix * fw + k] = v
                for r in range(1, fh):
                    for k in range(wf):
                        dst[r * wf + k] = dst[k]


cdef void _nearest_adj(const real[:, :, :, ::1] g, real[:, :, :, ::1] dx, int fh, int fw) noexcept nogil:
    cdef Py_ssize_t n = dx.shape[0], c = dx.shape[1], h = dx.shape[2], w = dx.shape[3]
    cdef Py_ssize_t b, ci, iy, ix, r, k
    cdef real acc
    cdef const real* src
    for b in range(n):
        for ci in range(c):
            for iy in range(h):
                for ix in range(w):
                    acc = 0
                    for r in range(fh):
                        src = &g[b, ci, iy * fh + r, ix * fw]
                        for k in range(fw):
                            acc = acc + src[k]
                    dx[b, ci, iy, ix] = acc


def nearest_upsample(x, int fh, int fw):
    n, c, h, w = x.shape
    y = np.empty((n, c, h * fh, w * fw), dtype=x.dtype)
    if x.dtype == np.float32:
        _nearest[float](x, y, fh, fw)
    else:
        _nearest[double](x, y, fh, fw)
    return y


def nearest_upsample_adjoint(grad, int fh, int fw):
    n, c, h, w = grad.shape
    grad = np.ascontiguousarray(grad)
    dx = np.zeros((n, c, h // fh, w // fw), dtype=grad.dtype)
    if grad.dtype == np.float32:
        _nearest_adj[float](grad, dx, fh, fw)
    else:
        _nearest_adj[double](grad, dx, fh, fw)
    return dx
