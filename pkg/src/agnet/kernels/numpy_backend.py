"""Pure NumPy kernels: im2col-free convolution via strided windows + BLAS.

Fallback backend when the compiled extension is unavailable, and the
reference implementation it is benchmarked against.  Only what the
network architectures need is supported: stride-1 convolutions and
non-overlapping max pooling.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import ShapeError

NAME = "numpy"

# Largest transient window copy tensordot is allowed to make (float32 elems).
_CHUNK_BUDGET = 8 * 1024 * 1024


def _check_stride(stride):
    if stride != 1:
        raise ShapeError(f"conv2d supports stride=1 only, got stride={stride}")


def _windows(xp, kh, kw):
    """Strided [N,C,Ho,Wo,kh,kw] view over a padded input. No copy."""
    n, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh, sw, sh, sw),
        writeable=False,
    )


def _batch_chunks(n, per_image):
    step = max(1, _CHUNK_BUDGET // max(1, per_image))
    for i in range(0, n, step):
        yield i, min(n, i + step)


def conv2d_forward(x, w, stride=1, padding=0):
    _check_stride(stride)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    out = np.empty((n, cout, ho, wo), dtype=x.dtype)
    win = _windows(xp, kh, kw)
    per_image = cin * kh * kw * ho * wo
    for i, j in _batch_chunks(n, per_image):
        # [chunk,Ho,Wo,Cout] <- contract over (C,kh,kw)
        y = np.tensordot(win[i:j], w, axes=([1, 4, 5], [1, 2, 3]))
        out[i:j] = y.transpose(0, 3, 1, 2)
    return out


def conv2d_backward(x, w, gy, stride=1, padding=0, need_gx=True, need_gw=True):
    _check_stride(stride)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    gx = gw = None

    if need_gw:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        win = _windows(xp, kh, kw)
        # [C,kh,kw,Cout] <- contract over (N,Ho,Wo)
        g = np.tensordot(win, gy, axes=([0, 2, 3], [0, 2, 3]))
        gw = np.ascontiguousarray(g.transpose(3, 0, 1, 2))

    if need_gx:
        # full correlation of gy with the spatially flipped kernel gives the
        # gradient of the padded input; slice the center to drop the padding
        gyp = np.pad(gy, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        wflip = w[:, :, ::-1, ::-1]
        win = _windows(gyp, kh, kw)
        hp, wp = h + 2 * padding, wd + 2 * padding
        gxp = np.empty((n, cin, hp, wp), dtype=x.dtype)
        per_image = cout * kh * kw * hp * wp
        for i, j in _batch_chunks(n, per_image):
            g = np.tensordot(win[i:j], wflip, axes=([1, 4, 5], [0, 2, 3]))
            gxp[i:j] = g.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        gx = np.ascontiguousarray(gx)
    return gx, gw


def maxpool2d_forward(x, k=2, stride=2):
    if k != stride:
        raise ShapeError(f"max_pool2d supports k == stride only, got k={k} stride={stride}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d needs H,W divisible by {k}, got H={h} W={w}")
    ho, wo = h // k, w // k
    win = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    # argmax of the row-major window gives first-occurrence tie handling
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    # flat index into the input H*W plane
    wy, wx = arg // k, arg % k
    oy, ox = np.indices((ho, wo))
    idx = ((oy * k)[None, None] + wy) * w + (ox * k)[None, None] + wx
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool2d_backward(gy, idx, h, w):
    n, c = gy.shape[:2]
    gx = np.zeros((n, c, h * w), dtype=gy.dtype)
    np.put_along_axis(gx, idx.reshape(n, c, -1), gy.reshape(n, c, -1), axis=-1)
    return gx.reshape(n, c, h, w)
