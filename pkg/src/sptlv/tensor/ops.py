"""Differentiable primitives.

Every function accepts :class:`Tensor` (or array-like constants) and returns
a new :class:`Tensor`. Backward closures return one gradient per input, in
input order, or ``None`` where no gradient is needed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import Tensor, as_tensor, make_result

logger = logging.getLogger(__name__)

# upper bound on elements of one im2col buffer
_COL_BUDGET = 1 << 21


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    ref = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    dt = None if ref is None else ref.dtype
    return as_tensor(a, dt), as_tensor(b, dt)


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_result("mul", ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result("div", out, (a, b),
                       lambda g: (_unbroadcast(g / bd, ad.shape),
                                  _unbroadcast(-g * out / bd, bd.shape)))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_result("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    xd = x.data
    # subgradient 0 at exact ties
    return make_result("abs", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_result("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sign(x) -> np.ndarray:
    return np.sign(as_tensor(x).data)


# ------------------------------------------------------------------ reductions
def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- structural
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return make_result("transpose", np.transpose(x.data, axes), (x,),
                       lambda g: (np.transpose(g, inv),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_result("getitem", x.data[idx], (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make_result("concat", np.concatenate([t.data for t in ts], axis=axis), ts,
                       lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    n = len(ts)
    return make_result("stack", np.stack([t.data for t in ts], axis=axis), ts,
                       lambda g: tuple(np.squeeze(p, axis) for p in np.split(g, n, axis=axis)))


# ------------------------------------------------------------------- linear
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")

    def backward(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return make_result("matmul", ad @ bd, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (B, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[-1]} != weight {weight.shape}")
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def linear_map(x, forward: Callable[[np.ndarray], np.ndarray],
               adjoint: Callable[[np.ndarray], np.ndarray], op: str = "linear_map") -> Tensor:
    """Apply a fixed (non-learned) linear operator given with its adjoint."""
    x = as_tensor(x)
    return make_result(op, forward(x.data), (x,), lambda g: (adjoint(g),))


# ------------------------------------------------------------- convolution
def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _cols_t(xt: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Column buffer of shape (C*k*k, B*ho*wo) from channel-major padded input (C, B, Hp, Wp)."""
    c, b = xt.shape[:2]
    cols = np.empty((c, k, k, b, ho, wo), dtype=xt.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, b * ho * wo)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) over NCHW input.

    Parameters
    ----------
    x : Tensor, shape (B, Cin, H, W)
    weight : Tensor, shape (Cout, Cin, k, k), k odd
    bias : Tensor, shape (Cout,), optional
    stride, padding : int

    Returns
    -------
    Tensor, shape (B, Cout, H', W') with H' = (H + 2 padding - k) // stride + 1.
    The result is a transposed view of a channel-major buffer; numpy keeps
    that layout through elementwise ops, which keeps the next conv cheap.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    B, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if Cw != C:
        raise DimensionError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if stride < 1 or H + 2 * padding < k or W + 2 * padding < k:
        raise DimensionError("conv2d: invalid stride/padding for input size")
    ho, wo = _conv_out(H, k, stride, padding), _conv_out(W, k, stride, padding)
    xt = x.data.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wm = weight.data.reshape(O, C * k * k)
    chunk = max(1, _COL_BUDGET // max(1, ho * wo * C * k * k))

    out = np.empty((O, B, ho, wo), dtype=np.result_type(x.data, wm))
    for s in range(0, B, chunk):
        r = wm @ _cols_t(xt[:, s:s + chunk], k, stride, ho, wo)
        if bias is not None:
            r += bias.data[:, None]
        out[:, s:s + chunk] = r.reshape(O, -1, ho, wo)

    def backward(g):
        gt = g.transpose(1, 0, 2, 3)
        dw = np.zeros_like(wm) if weight.requires_grad else None
        dxt = np.zeros_like(xt) if x.requires_grad else None
        for s in range(0, B, chunk):
            g2 = np.ascontiguousarray(gt[:, s:s + chunk]).reshape(O, -1)
            if dw is not None:
                dw += g2 @ _cols_t(xt[:, s:s + chunk], k, stride, ho, wo).T
            if dxt is not None:
                dcols = (wm.T @ g2).reshape(C, k, k, -1, ho, wo)
                dst = dxt[:, s:s + chunk]
                for i in range(k):
                    for j in range(k):
                        dst[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        dx = None
        if dxt is not None:
            if padding:
                dxt = dxt[:, :, padding:padding + H, padding:padding + W]
            dx = dxt.transpose(1, 0, 2, 3)
        db = gt.sum(axis=(1, 2, 3)) if bias is not None and bias.requires_grad else None
        return (dx, None if dw is None else dw.reshape(weight.shape), db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", out.transpose(1, 0, 2, 3), inputs, backward)


# ----------------------------------------------------------------- pooling
def max_pool2(x) -> Tensor:
    """2x2 max pooling with stride 2; gradient goes to the first argmax (row-major)."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise DimensionError(f"max_pool2 expects (B,C,H>=2,W>=2), got {x.shape}")
    B, C, H, W = x.shape
    h2, w2 = H // 2, W // 2
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)[:, :, :2 * h2, :2 * w2])
    win = xt.reshape(C, B, h2, 2, w2, 2)
    a, b = win[:, :, :, 0, :, 0], win[:, :, :, 0, :, 1]
    c, d = win[:, :, :, 1, :, 0], win[:, :, :, 1, :, 1]
    out = np.maximum(np.maximum(a, b), np.maximum(c, d))

    def backward(g):
        gt = g.transpose(1, 0, 2, 3)
        first = a == out
        second = ~first & (b == out)
        third = ~first & ~second & (c == out)
        fourth = ~(first | second | third)
        dwin = np.zeros((C, B, h2, 2, w2, 2), dtype=g.dtype)
        dwin[:, :, :, 0, :, 0] = gt * first
        dwin[:, :, :, 0, :, 1] = gt * second
        dwin[:, :, :, 1, :, 0] = gt * third
        dwin[:, :, :, 1, :, 1] = gt * fourth
        dxt = np.zeros((C, B, H, W), dtype=g.dtype)
        dxt[:, :, :2 * h2, :2 * w2] = dwin.reshape(C, B, 2 * h2, 2 * w2)
        return (dxt.transpose(1, 0, 2, 3),)

    return make_result("max_pool2", out.transpose(1, 0, 2, 3), (x,), backward)


def l2_pool(x, size: int = 5) -> Tensor:
    """Global L2 pooling over a ``size`` x ``size`` map -> (B, C, 1, 1)."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2:] != (size, size):
        raise DimensionError(f"l2_pool expects a {size}x{size} map, got {x.shape}")
    xd = x.data
    out = np.sqrt(np.sum(xd * xd, axis=(2, 3), keepdims=True))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * xd / safe, 0.0),)

    return make_result("l2_pool", out, (x,), backward)


# ------------------------------------------------------------ normalisation
@dataclass
class RunningStats:
    """Per-channel running mean/variance of a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    updates: int = 0
    momentum: float = 0.1
    eps: float = 1e-5
    _warned: bool = field(default=False, repr=False)

    @classmethod
    def init(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def _channel_major(a: np.ndarray) -> np.ndarray:
    """(B, C, ...) -> (C, B*...), a view when ``a`` came out of conv2d."""
    return (a.transpose(1, 0, 2, 3) if a.ndim == 4 else a.T).reshape(a.shape[1], -1)


def batch_norm(x, gamma, beta, stats: RunningStats, train: bool) -> Tensor:
    """Per-channel batch normalisation over (B, H, W) for NCHW or over B for NC input."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    C = xd.shape[1]
    # reductions run along contiguous rows of a channel-major buffer
    cshape = (C,) + ((xd.shape[0],) + xd.shape[2:] if xd.ndim == 4 else (xd.shape[0],))
    back = (1, 0, 2, 3) if xd.ndim == 4 else (1, 0)
    flat = _channel_major(xd)
    n = flat.shape[1]
    eps = stats.eps
    if train:
        if n < 2:
            raise DimensionError("batch_norm in train mode needs at least 2 values per channel")
        mu = flat.mean(axis=1)
        centred = flat - mu[:, None]
        var = np.einsum("ij,ij->i", centred, centred) / n
        m = stats.momentum
        stats.mean = ((1 - m) * stats.mean + m * mu).astype(stats.mean.dtype)
        stats.var = ((1 - m) * stats.var + m * var * n / (n - 1)).astype(stats.var.dtype)
        stats.updates += 1
    else:
        if stats.updates == 0 and not stats._warned:
            logger.warning("batch_norm evaluated before any running-stat update; using init stats")
            stats._warned = True
        mu, var = stats.mean.astype(xd.dtype), stats.var.astype(xd.dtype)
        centred = flat - mu[:, None]
    inv = (1.0 / np.sqrt(var + eps))[:, None]
    xhat = centred * inv
    gd = gamma.data.reshape(-1, 1)
    out = xhat * gd
    out += beta.data.reshape(-1, 1)

    def backward(g):
        gf = _channel_major(g)
        dgamma = np.einsum("ij,ij->i", gf, xhat)
        dbeta = gf.sum(axis=1)
        if train:
            dxhat = gf * gd
            dx = dxhat * n
            dx -= dxhat.sum(axis=1, keepdims=True)
            dx -= xhat * np.einsum("ij,ij->i", dxhat, xhat)[:, None]
            dx *= inv / n
        else:
            dx = gf * (gd * inv)
        return (dx.reshape(cshape).transpose(back), dgamma, dbeta)

    return make_result("batch_norm", out.reshape(cshape).transpose(back), (x, gamma, beta), backward)


def dropout(x, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# --------------------------------------------------------------------- LSTM
def lstm_cell(d, h_prev, c_prev, weights: dict) -> tuple[Tensor, Tensor]:
    """One LSTM step acting on the concatenation ``[d; h_prev]``.

    ``weights`` holds ``W_f, W_in, W_out, W_c`` of shape (C, 2C) and
    ``b_f, b_in, b_out, b_c`` of shape (C,).
    """
    d, h_prev, c_prev = as_tensor(d), as_tensor(h_prev), as_tensor(c_prev)
    if d.shape != h_prev.shape or d.shape != c_prev.shape:
        raise DimensionError(f"lstm_cell: shapes {d.shape}, {h_prev.shape}, {c_prev.shape} differ")
    z = concat([d, h_prev], axis=1)
    f = sigmoid(linear(z, weights["W_f"], weights["b_f"]))
    i = sigmoid(linear(z, weights["W_in"], weights["b_in"]))
    o = sigmoid(linear(z, weights["W_out"], weights["b_out"]))
    c_tilde = tanh(linear(z, weights["W_c"], weights["b_c"]))
    c = add(mul(f, c_prev), mul(i, c_tilde))
    h = mul(o, tanh(c))
    return h, c
