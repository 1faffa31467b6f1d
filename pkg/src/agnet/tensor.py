"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a C-contiguous float array.  Operations executed while
a tape is active (see ``recording``) append nodes to that tape; calling
``backward`` on a scalar walks the tape in reverse execution order, which
is a valid reverse-topological order, accumulating gradients additively
into ``Tensor.grad``.  Tensors that never feed the loss keep their
gradient untouched, and repeated backward calls keep accumulating.

Float32 is the default element type; ``set_default_dtype(np.float64)``
switches new tensors to float64 for high-precision gradient checks.
The convolution and pooling inner loops are delegated to the selected
kernels backend (compiled extension or NumPy fallback).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ShapeError

_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    """Set the element type used for newly created tensors."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default element type."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations for one backward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def clear(self) -> None:
        self._nodes.clear()

    def backward(self, loss: "Tensor") -> None:
        backward(loss, tape=self)


_active_tape: Optional[Tape] = None

# Incremented on every backward() call; lets callers prove that a code
# path (e.g. the localization pipeline) never backpropagates.
backward_pass_count = 0


@contextlib.contextmanager
def recording(tape: Optional[Tape] = None):
    """Activate a tape (a fresh one by default) and yield it."""
    global _active_tape
    prev = _active_tape
    _active_tape = tape if tape is not None else Tape()
    try:
        yield _active_tape
    finally:
        _active_tape = prev


@contextlib.contextmanager
def no_grad():
    """Suspend recording within the block."""
    global _active_tape
    prev = _active_tape
    _active_tape = None
    try:
        yield
    finally:
        _active_tape = prev


def active_tape() -> Optional[Tape]:
    return _active_tape


class Tensor:
    """N-dimensional float array, optionally participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dt = dtype or _default_dtype
        # order="C" (not ascontiguousarray) so 0-d scalars stay 0-d
        self.data = np.asarray(data, dtype=dt, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dt = like.data.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(value, dtype=dt), requires_grad=False, dtype=dt)


def record_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap a forward result and register its backward closure on the tape.

    ``backward_fn`` receives the gradient with respect to the output and
    returns one gradient (or None) per input, in order.
    """
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _active_tape
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``."""
    global backward_pass_count
    if tape is None:
        tape = _active_tape
    if tape is None:
        raise RuntimeError("backward() needs an active or explicit tape")
    if loss.size != 1:
        raise ShapeError(f"backward() expects a scalar loss, got shape {loss.shape}")
    backward_pass_count += 1

    # id -> (tensor, accumulated output gradient)
    pending: dict[int, list] = {
        id(loss): [loss, np.ones(loss.data.shape, dtype=loss.data.dtype)]
    }
    for node in reversed(tape._nodes):
        entry = pending.pop(id(node.out), None)
        if entry is None:
            continue
        g_out = entry[1]
        if node.out.requires_grad:
            node.out._accumulate_grad(g_out)
        for inp, g in zip(node.inputs, node.backward_fn(g_out)):
            if g is None or not inp.requires_grad:
                continue
            slot = pending.get(id(inp))
            if slot is None:
                pending[id(inp)] = [inp, np.asarray(g, dtype=inp.data.dtype)]
            else:
                slot[1] = slot[1] + g
    for tensor, g in pending.values():
        if tensor.requires_grad:
            tensor._accumulate_grad(np.asarray(g, dtype=tensor.data.dtype))


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data
    return record_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data
    return record_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data * b.data
    return record_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data / b.data
    return record_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return record_op(out, (a,), lambda g: (g / a.data,))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return record_op(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record_op(out, tensors, bwd)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.dtype, copy=True),)

    return record_op(np.asarray(out, dtype=a.dtype), (a,), bwd)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bwd(g):
        if axis is None:
            g2 = g
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(g2, a.shape) / count).astype(a.dtype, copy=True),)

    return record_op(np.asarray(out, dtype=a.dtype), (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return record_op(out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # stable logistic: exp of a non-positive argument only
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to 1."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record_op(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map: x[N,Din] @ w[Dout,Din]^T + b[Dout]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"linear: input features (axis 1) = {x.shape[1]} but weight in-features (axis 1) = {w.shape[1]}"
        )
    out = x.data @ w.data.T
    if b is not None:
        b = as_tensor(b, like=x)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data

    def bwd(g):
        gx = g @ w.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record_op(out, inputs, bwd)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv2d: input channels (axis 1) = {cin} but weight in-channels (axis 1) = {cin_w}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d expects odd kernel extents, got {kh}x{kw}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * padding}x{wd + 2 * padding} smaller than kernel {kh}x{kw}"
        )
    out = kernels.conv2d_forward(x.data, w.data, stride, padding)
    if b is not None:
        b = as_tensor(b, like=x)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out += b.data[None, :, None, None]

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx, gw = kernels.conv2d_backward(
            x.data, w.data, g, stride, padding,
            need_gx=x.requires_grad, need_gw=w.requires_grad,
        )
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record_op(out, inputs, bwd)


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping window max; gradient goes to the first max per window."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-D input, got {x.shape}")
    out, idx = kernels.maxpool2d_forward(x.data, k, stride)
    h, w = x.shape[2], x.shape[3]

    def bwd(g):
        return (kernels.maxpool2d_backward(np.ascontiguousarray(g), idx, h, w),)

    return record_op(out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [N,C,H,W] -> [N,C]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype, copy=True),)

    return record_op(out, (x,), bwd)


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """[n_out, n_in] interpolation matrix for one axis, align-corners=false:
    output center o samples input coordinate (o + 0.5) * n_in/n_out - 0.5,
    linearly blending the two neighbors (edge-clamped)."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    f = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    a = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(a, (np.arange(n_out), i0c), (1.0 - f).astype(dtype))
    np.add.at(a, (np.arange(n_out), i1c), f.astype(dtype))
    return a


def bilinear_upsample2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize (align-corners=false) to (out_h, out_w).

    Bilinear interpolation is separable, so the resize is two matrix
    products: A_y @ x @ A_x^T; the transpose pair gives the gradient.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if out_h < h or out_w < w or out_h <= 0 or out_w <= 0:
        raise ShapeError(
            f"bilinear_upsample2d: target {out_h}x{out_w} must be >= source {h}x{w} and positive"
        )
    ay = _resize_matrix(h, out_h, x.dtype)
    ax = _resize_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ay, x.data), ax.T)

    def bwd(g):
        return (np.matmul(np.matmul(ay.T, g), ax),)

    return record_op(np.ascontiguousarray(out), (x,), bwd)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Per-channel running statistics (biased variance)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None):
        dt = dtype or _default_dtype
        self.mean = np.zeros(channels, dtype=dt)
        self.var = np.ones(channels, dtype=dt)
        self.momentum = momentum
        self.eps = eps


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
) -> Tensor:
    """Channel-wise batch normalization over NCHW input.

    Train mode normalizes by batch statistics and updates the running
    stats in ``state``; eval mode normalizes by the running stats.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm2d: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)"
        )
    eps = state.eps
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.mean = ((1 - m) * state.mean + m * mu).astype(state.mean.dtype)
        state.var = ((1 - m) * state.var + m * var).astype(state.var.dtype)
    else:
        mu, var = state.mean, state.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = np.einsum("nchw,nchw->c", g, xhat)
        if training:
            m_count = x.shape[0] * x.shape[2] * x.shape[3]
            scale = gamma.data * inv
            mean_g = np.einsum("nchw->c", g) / m_count
            mean_gx = gg / m_count
            # gx = scale * (g - mean_g - xhat * mean_gx), built in place
            gx = xhat * (-mean_gx[None, :, None, None])
            gx += g
            gx -= mean_g[None, :, None, None]
            gx *= scale[None, :, None, None]
        else:
            gx = g * (gamma.data * inv)[None, :, None, None]
        return gx.astype(x.dtype, copy=False), gg, gb

    return record_op(out.astype(x.dtype, copy=False), (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def weighted_cross_entropy(
    logits: Tensor, labels: np.ndarray, class_weights: Optional[np.ndarray] = None
) -> Tensor:
    """Weighted mean of -log softmax(logits)[label] over the batch."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"weighted_cross_entropy expects [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0,{k}), got range [{labels.min()},{labels.max()}]")
    if class_weights is None:
        class_weights = np.ones(k, dtype=logits.dtype)
    else:
        class_weights = np.asarray(class_weights, dtype=logits.dtype)
        if class_weights.shape != (k,):
            raise ShapeError(f"class_weights shape {class_weights.shape} != ({k},)")
        if (class_weights < 0).any():
            raise ValueError("class_weights must be non-negative")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    wn = class_weights[labels]
    wsum = wn.sum()
    if wsum == 0:
        raise ValueError("all sampled class weights are zero")
    nll = -logp[np.arange(n), labels]
    loss = np.asarray((wn * nll).sum() / wsum, dtype=logits.dtype)

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((g * wn[:, None] / wsum) * p,)

    return record_op(loss, (logits,), bwd)
