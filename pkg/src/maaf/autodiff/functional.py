"""Differentiable op catalog.

Every op takes Tensors (or array-likes treated as constants), computes its
forward value with numpy and records a closure mapping the output gradient to
input gradients. No op mutates its inputs.
"""

from __future__ import annotations

import contextlib
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result

LN_EPS = 1e-5

# Active kink probe: relu/max-pool append their branch pattern here so that a
# finite-difference check can tell when a perturbation crossed a kink.
_KINK_PROBE: Optional[list] = None


@contextlib.contextmanager
def kink_probe():
    global _KINK_PROBE
    old = _KINK_PROBE
    _KINK_PROBE = []
    try:
        yield _KINK_PROBE
    finally:
        _KINK_PROBE = old


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _const(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result("div", out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    x = as_tensor(x)
    c = float(c)
    return make_result("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _const(b, a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _const(a, b), b
    return as_tensor(a), as_tensor(b)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result("log", np.log(xd), (x,), lambda g: (g / xd,))


def identity(x: Tensor) -> Tensor:
    return make_result("identity", x.data, (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINK_PROBE is not None:
        _KINK_PROBE.append(np.packbits(mask).tobytes())
    return make_result("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    out = out.astype(x.dtype, copy=False)
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result("tanh", out, (x,), lambda g: (g * (1 - out * out),))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result("matmul", ad @ bd, (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    src = x.shape
    return make_result("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return make_result("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat", (), detail="no inputs")
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise ShapeError("concat", xs[0].shape, x.shape)
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return make_result("concat", np.concatenate([x.data for x in xs], axis=ax), xs, bw)


def slice_(x: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    out = x.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=x.dtype)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] += g
        return (full,)

    return make_result("slice", np.ascontiguousarray(out), (x,), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result("sum", out, (x,), bw)


def sorted_sum(x: Tensor, axis: int) -> Tensor:
    """Sum along ``axis`` after sorting it, so the value is bitwise independent
    of the order of elements along that axis."""
    shape = x.shape
    out = np.sort(x.data, axis=axis).sum(axis=axis)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_result("sorted_sum", out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([shape[a] for a in axes]))
    if n == 0:
        raise ShapeError("mean", shape, detail="empty axis")
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_result("mean", out, (x,), bw)


# ---------------------------------------------------------------------------
# normalizations

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax", x.shape, detail="empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("log_softmax", x.shape, detail="empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias.

    Mean and variance are accumulated in float64 regardless of the working
    width.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gain.data + bias.data).astype(x.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        gg = gain.data.reshape((1,) * (g.ndim - 1) + (d,))
        dxhat = g64 * gg
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        dgain = (g64 * xhat).sum(axis=red) if gain.requires_grad else None
        dbias = g64.sum(axis=red) if bias.requires_grad else None
        dt = x.dtype
        return (dx.astype(dt),
                None if dgain is None else dgain.astype(dt),
                None if dbias is None else dbias.astype(dt))

    return make_result("layer_norm", out, (x, gain, bias), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-30) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise ValueError("l2_normalize: zero-norm vector")
    out = xd / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_result("l2_normalize", out, (x,), bw)


# ---------------------------------------------------------------------------
# stochastic and lookup ops

def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout. ``rng=None`` or ``p=0`` means evaluation mode (identity)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if rng is None or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return make_result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", weight.shape, ids.shape, detail="index out of range")
    vocab, d = weight.shape

    def bw(g):
        full = np.zeros((vocab, d), dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, d))
        return (full,)

    return make_result("embedding", weight.data[ids], (weight,), bw)


# ---------------------------------------------------------------------------
# convolution and pooling (NHWC layout)

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, h, w, c = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """x: (N, H, W, Cin); weight: (kh, kw, Cin, Cout); bias: (Cout,)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    kh, kw, cin, cout = weight.shape
    n, h, w, _ = x.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    cmat = cols.reshape(n * ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cmat @ wmat).reshape(n, ho, wo, cout)
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gmat = g.reshape(n * ho * wo, cout)
        gw = (cmat.T @ gmat).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 1, 2)) if bias.requires_grad else None
        return gx, gw, gb

    return make_result("conv2d", out, inputs, bw)


def max_pool2d(x: Tensor, k: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = stride or k
    if x.ndim != 4 or x.shape[1] < k or x.shape[2] < k:
        raise ShapeError("max_pool2d", x.shape, (k, k))
    n, h, w, c = x.shape
    cols, ho, wo = _im2col(x.data, k, k, stride, 0)
    flat = cols.reshape(n, ho, wo, k * k, c)
    arg = flat.argmax(axis=3)
    if _KINK_PROBE is not None:
        _KINK_PROBE.append(arg.astype(np.int16).tobytes())
    out = np.take_along_axis(flat, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bw(g):
        gflat = np.zeros((n, ho, wo, k * k, c), dtype=g.dtype)
        np.put_along_axis(gflat, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        gcols = gflat.reshape(n, ho, wo, k, k, c)
        gx = np.zeros((n, h, w, c), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
        return (gx,)

    return make_result("max_pool2d", np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------------------------
# composite helpers

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    lp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(n), targets] = 1.0
    return scale(sum_(mul(lp, onehot)), -1.0 / n)
