# Compiled hot kernels: im2col/col2im convolution plumbing and max pooling.
# GEMMs are delegated to BLAS through numpy; these loops only move data.

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _im2col_one(real[:, :, ::1] x, real[:, ::1] cols,
                      Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t pad) nogil:
    # x: [C,H,W] padded conceptually; cols: [C*kh*kw, Ho*Wo]
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t ho = h + 2 * pad - kh + 1
    cdef Py_ssize_t wo = w + 2 * pad - kw + 1
    cdef Py_ssize_t ci, u, v, oy, ox, iy, ix, row
    cdef real val
    for ci in range(c):
        for u in range(kh):
            for v in range(kw):
                row = (ci * kh + u) * kw + v
                for oy in range(ho):
                    iy = oy + u - pad
                    if iy < 0 or iy >= h:
                        for ox in range(wo):
                            cols[row, oy * wo + ox] = 0
                        continue
                    for ox in range(wo):
                        ix = ox + v - pad
                        if ix < 0 or ix >= w:
                            cols[row, oy * wo + ox] = 0
                        else:
                            cols[row, oy * wo + ox] = x[ci, iy, ix]


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _col2im_one(real[:, ::1] cols, real[:, :, ::1] gx,
                      Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t pad) nogil:
    # scatter-add of cols [C*kh*kw, Ho*Wo] back into gx [C,H,W]
    cdef Py_ssize_t c = gx.shape[0], h = gx.shape[1], w = gx.shape[2]
    cdef Py_ssize_t ho = h + 2 * pad - kh + 1
    cdef Py_ssize_t wo = w + 2 * pad - kw + 1
    cdef Py_ssize_t ci, u, v, oy, ox, iy, ix, row
    for ci in range(c):
        for u in range(kh):
            for v in range(kw):
                row = (ci * kh + u) * kw + v
                for oy in range(ho):
                    iy = oy + u - pad
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(wo):
                        ix = ox + v - pad
                        if 0 <= ix < w:
                            gx[ci, iy, ix] += cols[row, oy * wo + ox]


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t pad,
           real[:, ::1] cols, Py_ssize_t n):
    _im2col_one[real](x[n], cols, kh, kw, pad)


def col2im(real[:, ::1] cols, real[:, :, :, ::1] gx, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t pad, Py_ssize_t n):
    _col2im_one[real](cols, gx[n], kh, kw, pad)


@cython.boundscheck(False)
@cython.wraparound(False)
def maxpool2d(real[:, :, :, ::1] x, Py_ssize_t k, real[:, :, :, ::1] out,
              cnp.int64_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h // k, wo = w // k
    cdef Py_ssize_t b, ci, oy, ox, u, v, by, bx
    cdef real best, val
    cdef Py_ssize_t besty, bestx
    for b in range(n):
        for ci in range(c):
            for oy in range(ho):
                by = oy * k
                for ox in range(wo):
                    bx = ox * k
                    best = x[b, ci, by, bx]
                    besty = by
                    bestx = bx
                    for u in range(k):
                        for v in range(k):
                            val = x[b, ci, by + u, bx + v]
                            if val > best:
                                best = val
                                besty = by + u
                                bestx = bx + v
                    out[b, ci, oy, ox] = best
                    idx[b, ci, oy, ox] = besty * w + bestx


@cython.boundscheck(False)
@cython.wraparound(False)
def maxpool2d_grad(real[:, :, :, ::1] gy, cnp.int64_t[:, :, :, ::1] idx,
                   real[:, :, :, ::1] gx):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t w = gx.shape[3]
    cdef Py_ssize_t b, ci, oy, ox
    cdef cnp.int64_t flat
    for b in range(n):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    flat = idx[b, ci, oy, ox]
                    gx[b, ci, flat // w, flat % w] += gy[b, ci, oy, ox]
