"""Differentiable operations over :class:`Tensor`.

Layout convention for 4-D tensors is batch x channels x height x width.
Max and min picks route their gradient to the first index in scan order.
"""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"incompatible shapes {a} and {b}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return Tensor._result(-a.data, (a,), backward, "neg")


def multiply(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting.

    The usual case is a ``[B,1,H,W]`` map scaling every channel of a
    ``[B,C,H,W]`` feature tensor.
    """
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * bd, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ad, b.shape))

    return Tensor._result(ad * bd, (a, b), backward, "multiply")


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / bd, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / bd, b.shape))

    return Tensor._result(out, (a, b), backward, "divide")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out)

    return Tensor._result(out, (a,), backward, "sqrt")


def square(a: Tensor) -> Tensor:
    ad = a.data

    def backward(g):
        a._accumulate(2.0 * g * ad)

    return Tensor._result(ad * ad, (a,), backward, "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._result(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - out * out))

    return Tensor._result(out, (x,), backward, "tanh")


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` in overflow-free form."""
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))

    def backward(g):
        x._accumulate(g * _sigmoid(xd))

    return Tensor._result(out, (x,), backward, "softplus")


def log_sigmoid(x: Tensor) -> Tensor:
    return neg(softplus(neg(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


sigmoid_np = _sigmoid

# ---------------------------------------------------------------------------
# shape / reduction
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def backward(g):
        x._accumulate(g.reshape(src))

    return Tensor._result(x.data.reshape(shape), (x,), backward, "reshape")


def getitem(x: Tensor, idx) -> Tensor:
    src = x.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return Tensor._result(np.array(x.data[idx], copy=True), (x,), backward, "getitem")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, src))

    return Tensor._result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,),
                          backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            x._accumulate(g[tuple(sl)])

    return Tensor._result(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


def _extreme_over(x: Tensor, axes: tuple, pick, what: str) -> Tensor:
    """Max/min over trailing ``axes`` keeping dims; gradient to first pick."""
    lead = x.shape[: x.ndim - len(axes)]
    flat = x.data.reshape(lead + (-1,))
    idx = pick(flat, axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)
    out = vals.reshape(lead + (1,) * len(axes))

    def backward(g):
        full = np.zeros_like(flat)
        np.put_along_axis(full, idx[..., None], g.reshape(lead + (1,)), axis=-1)
        x._accumulate(full.reshape(x.shape))

    return Tensor._result(out, (x,), backward, what)


def spatial_max(x: Tensor) -> Tensor:
    """Max over the last two axes, keepdims; ``[B,C,H,W] -> [B,C,1,1]``."""
    return _extreme_over(x, (2, 3), np.argmax, "spatial_max")


def spatial_min(x: Tensor) -> Tensor:
    return _extreme_over(x, (2, 3), np.argmin, "spatial_min")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ bd.T)
        if b.requires_grad:
            b._accumulate(ad.T @ g)

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


# ---------------------------------------------------------------------------
# convolutional building blocks
# ---------------------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, padding: int, what: str, floor: bool = False) -> int:
    span = n + 2 * padding - k
    if k < 1 or stride < 1 or padding < 0:
        raise ConfigError(f"{what}: need k>=1, stride>=1, padding>=0")
    if span < 0 or (span % stride and not floor):
        raise ConfigError(f"{what}: output size ({n}+2*{padding}-{k})/{stride}+1 is not a "
                          "positive integer")
    return span // stride + 1


def _shifted(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[..., i:i + stride * ho:stride, j:j + stride * wo:stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B,Cin,H,W]`` with ``weight[Cout,Cin,k,k]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    bsz, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin or k != k2:
        raise DimensionError(f"conv2d weight {weight.shape} does not match input {x.shape}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias {bias.shape} != ({cout},)")
    ho = _out_size(h, k, stride, padding, "conv2d")
    wo = _out_size(w, k, stride, padding, "conv2d")

    # channel-major im2col: cols[(cin, ki, kj), (b, ho, wo)]
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((cin, k, k, bsz, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = _shifted(xt, i, j, stride, ho, wo)
    cols = cols.reshape(cin * k * k, -1)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, bsz, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        if weight.requires_grad:
            weight._accumulate((g2 @ cols.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, k, k, bsz, ho, wo)
            dxt = np.zeros(xt.shape)
            for i in range(k):
                for j in range(k):
                    _shifted(dxt, i, j, stride, ho, wo)[...] += dcols[:, i, j]
            if padding:
                dxt = dxt[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(dxt.transpose(1, 0, 2, 3))

    return Tensor._result(out, parents, backward, "conv2d")


def max_pool(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"max_pool expects 4-D input, got {x.shape}")
    bsz, c, h, w = x.shape
    if padding >= k:
        raise ConfigError("max_pool: padding must be smaller than the kernel")
    # pooling floors the output size (8 -> 4 for k=3, s=2, p=1)
    ho = _out_size(h, k, stride, padding, "max_pool", floor=True)
    wo = _out_size(w, k, stride, padding, "max_pool", floor=True)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    # window offsets in row-major scan order, so argmax ties pick the first element
    stack = np.stack([_shifted(xp, i, j, stride, ho, wo) for i in range(k) for j in range(k)])
    arg = np.argmax(stack, axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]

    def backward(g):
        dxp = np.zeros(xp.shape)
        for n in range(k * k):
            i, j = divmod(n, k)
            _shifted(dxp, i, j, stride, ho, wo)[...] += np.where(arg == n, g, 0.0)
        if padding:
            dxp = dxp[:, :, padding:padding + h, padding:padding + w]
        x._accumulate(dxp)

    return Tensor._result(out, (x,), backward, "max_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    return mean(x, axis=(2, 3))


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` linear-interpolation operator.

    Half-pixel centres (align_corners=False): ``src = (dst + 0.5) * n_in / n_out - 0.5``,
    clamped to ``[0, n_in - 1]``.
    """
    if n_in < 1 or n_out < 1:
        raise ConfigError("resize sizes must be >= 1")
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - w1)
    np.add.at(mat, (rows, i1), w1)
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"bilinear_resize expects 4-D input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigError("bilinear_resize: output size must be >= 1")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        def ident(g):
            x._accumulate(g)
        return Tensor._result(x.data.copy(), (x,), ident, "bilinear_resize")
    ry = resize_matrix(h, out_h)
    rx = resize_matrix(w, out_w)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        x._accumulate(np.matmul(np.matmul(ry.T, g), rx))

    return Tensor._result(out, (x,), backward, "bilinear_resize")


def resize_np(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a plain array over its last two axes (no graph)."""
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return np.array(arr, dtype=np.float64, copy=True)
    return np.matmul(np.matmul(resize_matrix(h, out_h), arr), resize_matrix(w, out_w).T)


# ---------------------------------------------------------------------------
# min-merge
# ---------------------------------------------------------------------------

def elementwise_min(inputs) -> Tensor:
    """Per-location minimum of equally shaped tensors."""
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise DimensionError("elementwise_min needs at least one input")
    shape = inputs[0].shape
    for t in inputs[1:]:
        if t.shape != shape:
            raise DimensionError(f"elementwise_min shape mismatch {t.shape} vs {shape}")
    if len(inputs) == 1:
        t = inputs[0]

        def ident(g):
            t._accumulate(g)

        return Tensor._result(t.data.copy(), (t,), ident, "elementwise_min")
    stacked = np.stack([t.data for t in inputs])
    arg = np.argmin(stacked, axis=0)
    out = np.take_along_axis(stacked, arg[None], axis=0)[0]

    def backward(g):
        for i, t in enumerate(inputs):
            if t.requires_grad:
                t._accumulate(np.where(arg == i, g, 0.0))

    return Tensor._result(out, inputs, backward, "elementwise_min")


def masked_channel_min(x: Tensor, include: np.ndarray) -> Tensor:
    """Minimum over the channel axis restricted to ``include[B,C]``.

    ``x`` is ``[B,C,H,W]``; returns ``[B,1,H,W]``.  Every row of ``include``
    must select at least one channel.
    """
    include = np.asarray(include, dtype=bool)
    if x.ndim != 4 or include.shape != x.shape[:2]:
        raise DimensionError(f"masked_channel_min: mask {include.shape} vs input {x.shape}")
    if not include.any(axis=1).all():
        raise DimensionError("masked_channel_min: every row needs one selected channel")
    masked = np.where(include[:, :, None, None], x.data, np.inf)
    arg = np.argmin(masked, axis=1)[:, None]
    out = np.take_along_axis(x.data, arg, axis=1)

    def backward(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, arg, g, axis=1)
        x._accumulate(full)

    return Tensor._result(out, (x,), backward, "masked_channel_min")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def multilabel_bce(scores: Tensor, labels, weights=None) -> Tensor:
    """Mean per-entry sigmoid binary cross-entropy, one classifier per column.

    Optional ``weights`` (same shape) scale each entry; the mean still divides
    by the total entry count.
    """
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    if scores.shape != y.shape:
        raise DimensionError(f"scores {scores.shape} vs labels {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("multilabel_bce labels must be 0 or 1")
    s = scores.data
    wts = np.ones_like(s) if weights is None else np.broadcast_to(
        np.asarray(weights, dtype=np.float64), s.shape)
    per = wts * (np.maximum(s, 0.0) - s * y + np.log1p(np.exp(-np.abs(s))))
    n = s.size

    def backward(g):
        scores._accumulate(g * wts * (_sigmoid(s) - y) / n)

    return Tensor._result(np.asarray(per.mean()), (scores,), backward, "multilabel_bce")
