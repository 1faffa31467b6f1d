"""Convolution/pooling kernels backed by the compiled extension.

im2col/col2im data movement runs in Cython; the contraction itself is a
BLAS GEMM via numpy.  Signatures mirror ``numpy_backend``.
"""

import numpy as np

from ..errors import ShapeError
from . import _cykernels as _cy

NAME = "cython"


def _check_stride(stride):
    if stride != 1:
        raise ShapeError(f"conv2d supports stride=1 only, got stride={stride}")


def conv2d_forward(x, w, stride=1, padding=0):
    _check_stride(stride)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    w2 = w.reshape(cout, cin * kh * kw)
    out = np.empty((n, cout, ho, wo), dtype=x.dtype)
    cols = np.empty((cin * kh * kw, ho * wo), dtype=x.dtype)
    x = np.ascontiguousarray(x)
    for b in range(n):
        _cy.im2col(x, kh, kw, padding, cols, b)
        np.matmul(w2, cols, out=out[b].reshape(cout, ho * wo))
    return out


def conv2d_backward(x, w, gy, stride=1, padding=0, need_gx=True, need_gw=True):
    _check_stride(stride)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    w2 = w.reshape(cout, cin * kh * kw)
    gx = np.zeros_like(x) if need_gx else None
    gw2 = np.zeros((cout, cin * kh * kw), dtype=w.dtype) if need_gw else None
    cols = np.empty((cin * kh * kw, ho * wo), dtype=x.dtype)
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy)
    for b in range(n):
        gyb = gy[b].reshape(cout, ho * wo)
        if need_gw:
            _cy.im2col(x, kh, kw, padding, cols, b)
            gw2 += gyb @ cols.T
        if need_gx:
            gcols = w2.T @ gyb
            _cy.col2im(np.ascontiguousarray(gcols), gx, kh, kw, padding, b)
    gw = gw2.reshape(cout, cin, kh, kw) if need_gw else None
    return gx, gw


def maxpool2d_forward(x, k=2, stride=2):
    if k != stride:
        raise ShapeError(f"max_pool2d supports k == stride only, got k={k} stride={stride}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d needs H,W divisible by {k}, got H={h} W={w}")
    out = np.empty((n, c, h // k, w // k), dtype=x.dtype)
    idx = np.empty(out.shape, dtype=np.int64)
    _cy.maxpool2d(np.ascontiguousarray(x), k, out, idx)
    return out, idx


def maxpool2d_backward(gy, idx, h, w):
    n, c = gy.shape[:2]
    gx = np.zeros((n, c, h, w), dtype=gy.dtype)
    _cy.maxpool2d_grad(np.ascontiguousarray(gy), idx, gx)
    return gx
