"""Soft attention gates over convolutional feature maps.

A gate scores every spatial position of a feature map against a gating
signal drawn from a coarser, more abstract stage of the same network,
normalizes the scores into an attention map, and pools the features
under that map into a single vector.  Two compatibility functions are
provided:

* additive: ``c_i = <psi, f_i + g>``, a single learned projection of the
  summed feature and gating vectors;
* gated: ``c_i = psi^T relu(W_f f_i + W_g g + b_g) + b_psi``, which first
  maps both inputs into a shared intermediate space so the gate can
  learn which feature/gating channel combinations matter.

``grid_attention`` applies the gated form when the gating signal lives
on a coarser grid than the features: the gating tensor is projected by a
1x1 convolution on its own grid, bilinearly upsampled to the feature
resolution, and combined position-wise, so every feature location is
compared against its aligned neighborhood of the gating signal.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

NORMALIZATIONS = ("minsum", "softmax", "sigmoid")


class GateParams:
    """Learnable parameters of one gated attention unit.

    w_f: [C_int, C_s, 1, 1]   feature projection
    w_g: [C_int, C_g, 1, 1]   gating-signal projection
    b_g: [C_int]              shared additive bias
    psi: [1, C_int, 1, 1]     score projection
    b_psi: [1]                score bias
    """

    def __init__(self, w_f: Tensor, w_g: Tensor, b_g: Tensor, psi: Tensor, b_psi: Tensor):
        self.w_f = w_f
        self.w_g = w_g
        self.b_g = b_g
        self.psi = psi
        self.b_psi = b_psi

    @property
    def c_s(self) -> int:
        return self.w_f.shape[1]

    @property
    def c_g(self) -> int:
        return self.w_g.shape[1]

    @property
    def c_int(self) -> int:
        return self.w_f.shape[0]

    def tensors(self) -> dict:
        return {
            "w_f": self.w_f,
            "w_g": self.w_g,
            "b_g": self.b_g,
            "psi": self.psi,
            "b_psi": self.b_psi,
        }


def init_gate_params(
    rng: np.random.Generator, c_s: int, c_g: int, c_int: Optional[int] = None, dtype=None
) -> GateParams:
    """He-normal projections, zero biases.  C_int defaults to C_s."""
    c_int = c_int or c_s
    dt = dtype or T.default_dtype()

    def he(shape, fan_in):
        return Tensor(
            rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True, dtype=dt
        )

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True, dtype=dt)

    return GateParams(
        w_f=he((c_int, c_s, 1, 1), c_s),
        w_g=he((c_int, c_g, 1, 1), c_g),
        b_g=zeros((c_int,)),
        psi=he((1, c_int, 1, 1), c_int),
        b_psi=zeros((1,)),
    )


def gate_param_count(c_s: int, c_g: int, c_int: Optional[int] = None) -> int:
    """Closed-form parameter count of one gate: the two projections,
    their shared bias, and the scalar score head."""
    c_int = c_int or c_s
    return c_int * c_s + c_int * c_g + c_int + c_int + 1


def compatibility_additive(f: Tensor, g: Tensor, psi: Tensor, b_psi: Optional[Tensor] = None) -> Tensor:
    """Additive compatibility: project f_i + g onto psi at every position.

    f: [N,C,H,W]; g broadcastable against f (e.g. [N,C,1,1] or [N,C,H,W]);
    psi: [1,C,1,1].  Returns scores [N,1,H,W].
    """
    if f.ndim != 4:
        raise ShapeError(f"compatibility_additive expects 4-D features, got {f.shape}")
    if psi.shape[1] != f.shape[1]:
        raise ShapeError(
            f"psi channels (axis 1) = {psi.shape[1]} but feature channels = {f.shape[1]}"
        )
    return T.conv2d(T.add(f, g), psi, b_psi)


def compatibility_gated(f: Tensor, g: Tensor, params: GateParams) -> Tensor:
    """Gated compatibility on a shared grid: psi^T relu(W_f f + W_g g + b_g) + b_psi.

    f: [N,C_s,H,W] and g: [N,C_g,H,W] must share spatial extents.
    Returns scores [N,1,H,W].
    """
    if f.shape[0] != g.shape[0] or f.shape[2:] != g.shape[2:]:
        raise ShapeError(
            f"gated compatibility needs aligned grids, got f {f.shape} and g {g.shape}"
        )
    q = T.conv2d(f, params.w_f, params.b_g)
    k = T.conv2d(g, params.w_g, None)
    return T.conv2d(T.relu(T.add(q, k)), params.psi, params.b_psi)


def normalize_attention(scores: Tensor, mode: str = "minsum") -> Tensor:
    """Turn raw compatibility scores into an attention map, per (image, map).

    minsum   shift scores so the spatial minimum is 0, divide by the sum;
             preserves score ordering and linear structure.  A constant
             map has no preference, so it falls back to uniform weights.
    softmax  exponential normalization over spatial positions.
    sigmoid  independent per-position weights in (0,1); does not sum to 1.
    """
    if scores.ndim != 4:
        raise ShapeError(f"normalize_attention expects 4-D scores, got {scores.shape}")
    if mode == "minsum":
        return _minsum(scores)
    if mode == "softmax":
        n, c, h, w = scores.shape
        flat = T.reshape(scores, (n, c, h * w))
        return T.reshape(T.softmax(flat, axis=-1), (n, c, h, w))
    if mode == "sigmoid":
        return T.sigmoid(scores)
    raise ValueError(f"unknown attention normalization {mode!r}; expected one of {NORMALIZATIONS}")


def _minsum(scores: Tensor) -> Tensor:
    n, c, h, w = scores.shape
    npix = h * w
    flat = scores.data.reshape(n, c, npix)
    m = flat.min(axis=-1, keepdims=True)
    jmin = flat.argmin(axis=-1)
    u = flat - m
    s = u.sum(axis=-1, keepdims=True)
    # constant map: every shifted score is exactly 0
    inv = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 0.0).astype(flat.dtype)
    alpha = u * inv
    alpha[(s == 0)[..., 0]] = 1.0 / npix
    out = np.ascontiguousarray(alpha.reshape(n, c, h, w))

    def bwd(g):
        gf = g.reshape(n, c, npix)
        weighted = (gf * alpha).sum(axis=-1, keepdims=True)
        total = gf.sum(axis=-1, keepdims=True)
        gc = (gf - weighted) * inv
        # the minimum position also moves the shift and the sum
        corr = (weighted * npix - total) * inv
        np.put_along_axis(
            gc, jmin[..., None], np.take_along_axis(gc, jmin[..., None], -1) + corr, -1
        )
        return (gc.reshape(n, c, h, w),)

    return T.record_op(out, (scores,), bwd)


def attend_pool(f: Tensor, alpha: Tensor) -> Tensor:
    """Attention-weighted spatial sum: [N,C,H,W] x [N,1,H,W] -> [N,C]."""
    if f.ndim != 4 or alpha.ndim != 4:
        raise ShapeError(f"attend_pool expects 4-D inputs, got {f.shape} and {alpha.shape}")
    if alpha.shape[1] not in (1, f.shape[1]) or f.shape[2:] != alpha.shape[2:]:
        raise ShapeError(f"attention map {alpha.shape} does not align with features {f.shape}")
    return T.tensor_sum(T.mul(f, alpha), axis=(2, 3))


def grid_attention(
    f: Tensor, g: Tensor, params: GateParams, normalization: str = "minsum"
):
    """Gate features against a coarser gating grid.

    The gating tensor is projected on its own grid, bilinearly upsampled
    to the feature resolution, and fused with the projected features.
    Returns (attended [N,C_s], attention map [N,1,H,W]).
    """
    if f.shape[1] != params.c_s:
        raise ShapeError(f"features have {f.shape[1]} channels, gate expects {params.c_s}")
    if g.shape[1] != params.c_g:
        raise ShapeError(f"gating signal has {g.shape[1]} channels, gate expects {params.c_g}")
    if f.shape[2] % g.shape[2] or f.shape[3] % g.shape[3]:
        raise ShapeError(
            f"feature extents {f.shape[2:]} are not a multiple of the gating grid {g.shape[2:]}"
        )
    q = T.conv2d(f, params.w_f, params.b_g)
    k = T.conv2d(g, params.w_g, None)
    if g.shape[2:] != f.shape[2:]:
        k = T.bilinear_upsample2d(k, f.shape[2], f.shape[3])
    scores = T.conv2d(T.relu(T.add(q, k)), params.psi, params.b_psi)
    alpha = normalize_attention(scores, normalization)
    return attend_pool(f, alpha), alpha
