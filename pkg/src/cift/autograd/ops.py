"""Differentiable operations on :class:`Tensor`.

Every op is a :class:`Function` subclass with an analytic backward rule and a
lower-case convenience wrapper. Binary ops broadcast only along leading
extents; anything else has to be reshaped explicitly by the caller.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError, DimensionError, VocabularyError
from .tensor import Function, Tensor, check_shapes_broadcast


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))) if lead else grad


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- binary ops


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        check_shapes_broadcast(a.shape, b.shape, "add")
        ctx.shapes = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        check_shapes_broadcast(a.shape, b.shape, "sub")
        ctx.shapes = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        check_shapes_broadcast(a.shape, b.shape, "mul")
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = _unbroadcast(g * b, a.shape) if ctx.needs[0] else None
        gb = _unbroadcast(g * a, b.shape) if ctx.needs[1] else None
        return ga, gb


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        check_shapes_broadcast(a.shape, b.shape, "div")
        out = a / b
        ctx.save(a, b, out)
        return out

    @staticmethod
    def backward(ctx, g):
        a, b, out = ctx.saved
        ga = _unbroadcast(g / b, a.shape) if ctx.needs[0] else None
        gb = _unbroadcast(-g * out / b, b.shape) if ctx.needs[1] else None
        return ga, gb


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


class MatMul(Function):
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
        ctx.save(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = gb = None
        if ctx.needs[0]:
            ga = g @ np.swapaxes(b, -1, -2)
        if ctx.needs[1]:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a, -1, -2) @ g
        return ga, gb


# ------------------------------------------------------------- elementwise


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, x):
        # Two-branch form avoids exp overflow for large |x|.
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (g * y * (1.0 - y),)


class Tanh(Function):
    @staticmethod
    def forward(ctx, x):
        y = np.tanh(x)
        ctx.save(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (g * (1.0 - y * y),)


class Relu(Function):
    @staticmethod
    def forward(ctx, x):
        mask = x > 0
        ctx.save(mask)
        return np.where(mask, x, 0.0)

    @staticmethod
    def backward(ctx, g):
        (mask,) = ctx.saved
        return (np.where(mask, g, 0.0),)


class Exp(Function):
    @staticmethod
    def forward(ctx, x):
        y = np.exp(x)
        ctx.save(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (g * y,)


class Log(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save(x)
        return np.log(x)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved
        return (g / x,)


class Abs(Function):
    """|x| with subgradient 0 at the kink."""

    @staticmethod
    def forward(ctx, x):
        ctx.save(np.sign(x))
        return np.abs(x)

    @staticmethod
    def backward(ctx, g):
        (s,) = ctx.saved
        return (g * s,)


# -------------------------------------------------------------- reductions


class Sum(Function):
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx.shape = x.shape
        ctx.axis = axis
        ctx.keepdims = keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    @staticmethod
    def backward(ctx, g):
        shape, axis = ctx.shape, ctx.axis
        if axis is not None and not ctx.keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % len(shape) for a in axes)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)


# ------------------------------------------------------------ shape ops


class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx.shape = x.shape
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


class BroadcastTo(Function):
    """Explicit numpy-rule broadcast (size-1 axes may expand anywhere)."""

    @staticmethod
    def forward(ctx, x, shape):
        try:
            out = np.broadcast_to(x, shape)
        except ValueError:
            raise DimensionError(f"cannot broadcast {x.shape} to {tuple(shape)}") from None
        ctx.shape = x.shape
        return np.ascontiguousarray(out)

    @staticmethod
    def backward(ctx, g):
        shape = ctx.shape
        lead = g.ndim - len(shape)
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)


class Transpose(Function):
    @staticmethod
    def forward(ctx, x, axes=None):
        axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
        ctx.axes = axes
        return np.transpose(x, axes)

    @staticmethod
    def backward(ctx, g):
        return (np.transpose(g, np.argsort(ctx.axes)),)


class GetItem(Function):
    """Basic/advanced indexing; the result is a copy, never a view."""

    @staticmethod
    def forward(ctx, x, index):
        ctx.shape = x.shape
        ctx.index = index
        return np.array(x[index], dtype=np.float64, copy=True)

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape)
        np.add.at(out, ctx.index, g)
        return (out,)


class Concat(Function):
    @staticmethod
    def forward(ctx, *xs, axis=0):
        ctx.axis = axis
        ctx.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def backward(ctx, g):
        splits = np.cumsum(ctx.sizes)[:-1]
        return tuple(np.split(g, splits, axis=ctx.axis))


class Pad(Function):
    """Zero-pad along one axis."""

    @staticmethod
    def forward(ctx, x, axis, before, after):
        width = [(0, 0)] * x.ndim
        width[axis] = (before, after)
        ctx.slc = (axis, before, x.shape[axis])
        return np.pad(x, width)

    @staticmethod
    def backward(ctx, g):
        axis, before, n = ctx.slc
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(before, before + n)
        return (g[tuple(idx)],)


# ------------------------------------------------------ softmax family


class Softmax(Function):
    @staticmethod
    def forward(ctx, x, axis=-1):
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        ctx.save(y)
        ctx.axis = axis
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (y * (g - (g * y).sum(axis=ctx.axis, keepdims=True)),)


class LogSoftmax(Function):
    @staticmethod
    def forward(ctx, x, axis=-1):
        m = x.max(axis=axis, keepdims=True)
        z = x - m
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        y = z - lse
        ctx.save(y)
        ctx.axis = axis
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (g - np.exp(y) * g.sum(axis=ctx.axis, keepdims=True),)


class LayerNorm(Function):
    """Normalise over the last axis, then scale and shift."""

    @staticmethod
    def forward(ctx, x, gamma, beta, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx.save(xhat, inv, gamma)
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, g):
        xhat, inv, gamma = ctx.saved
        d = xhat.shape[-1]
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0) if ctx.needs[1] else None
        dbeta = g.reshape(-1, d).sum(axis=0) if ctx.needs[2] else None
        dx = None
        if ctx.needs[0]:
            dxhat = g * gamma
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta


# ------------------------------------------------------------ lookups


class Embedding(Function):
    @staticmethod
    def forward(ctx, table, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise VocabularyError(f"token id out of range [0, {table.shape[0]}): {ids.min()}..{ids.max()}")
        ctx.ids = ids
        ctx.shape = table.shape
        return table[ids]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape)
        np.add.at(out, ctx.ids.reshape(-1), g.reshape(-1, ctx.shape[-1]))
        return (out,)


class Pick(Function):
    """``out[..., i] = x[..., index[..., i]]`` along the last axis."""

    @staticmethod
    def forward(ctx, x, index):
        index = np.asarray(index, dtype=np.int64)
        ctx.index = index
        ctx.shape = x.shape
        return np.take_along_axis(x, index[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape)
        np.put_along_axis(out, ctx.index[..., None], g[..., None], axis=-1)
        return (out,)


# ---------------------------------------------------------- convolution


class Conv1d(Function):
    """Zero-padded 'same' 1-D convolution over the time axis.

    x: [..., T, d_in], kernel: [k, d_in, d_out]; output length ceil(T / stride).
    """

    @staticmethod
    def forward(ctx, x, kernel, stride=1):
        k, d_in, d_out = kernel.shape
        if k % 2 == 0:
            raise ConfigError(f"conv1d kernel width must be odd, got {k}")
        if x.shape[-1] != d_in:
            raise DimensionError(f"conv1d input channels {x.shape} do not match kernel {kernel.shape}")
        pad = (k - 1) // 2
        T = x.shape[-2]
        t_out = (T + 2 * pad - k) // stride + 1
        width = [(0, 0)] * x.ndim
        width[-2] = (pad, pad)
        xp = np.pad(x, width)
        # columns[..., t, j, :] = xp[..., t * stride + j, :]
        cols = np.stack([xp[..., j: j + stride * (t_out - 1) + 1: stride, :] for j in range(k)], axis=-2)
        cols = cols.reshape(x.shape[:-2] + (t_out, k * d_in))
        ctx.save(cols, kernel)
        ctx.meta = (x.shape, stride, pad, t_out)
        return cols @ kernel.reshape(k * d_in, d_out)

    @staticmethod
    def backward(ctx, g):
        cols, kernel = ctx.saved
        x_shape, stride, pad, t_out = ctx.meta
        k, d_in, d_out = kernel.shape
        gx = gk = None
        if ctx.needs[1]:
            gk = (cols.reshape(-1, k * d_in).T @ g.reshape(-1, d_out)).reshape(kernel.shape)
        if ctx.needs[0]:
            gcols = (g @ kernel.reshape(k * d_in, d_out).T).reshape(g.shape[:-1] + (k, d_in))
            padded = list(x_shape)
            padded[-2] += 2 * pad
            gxp = np.zeros(padded)
            for j in range(k):
                gxp[..., j: j + stride * (t_out - 1) + 1: stride, :] += gcols[..., j, :]
            gx = gxp[..., pad: pad + x_shape[-2], :]
        return gx, gk


# ------------------------------------------------------------- wrappers


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def neg(a):
    return Neg.apply(a)


def matmul(a, b):
    return MatMul.apply(a, b)


def sigmoid(x):
    return Sigmoid.apply(x)


def tanh(x):
    return Tanh.apply(x)


def relu(x):
    return Relu.apply(x)


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


def abs(x):  # noqa: A001
    return Abs.apply(x)


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "add": add, "mul": mul}


def elementwise(kind: str, *args):
    """Dispatch by name: sigmoid, tanh, relu (unary) or add, mul (binary)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*args)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return Sum.apply(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def broadcast_to(x, shape):
    x = _as_tensor(x)
    return x if x.shape == tuple(shape) else BroadcastTo.apply(x, shape=tuple(shape))


def transpose(x, axes=None):
    return Transpose.apply(x, axes=axes)


def swap_last(x):
    nd = _as_tensor(x).ndim
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return Transpose.apply(x, axes=tuple(axes))


def getitem(x, index):
    return GetItem.apply(x, index=index)


def concat(xs, axis=0):
    return Concat.apply(*xs, axis=axis)


def pad(x, axis, before, after):
    return Pad.apply(x, axis=axis, before=before, after=after)


def softmax(x, axis=-1):
    return Softmax.apply(x, axis=axis)


def log_softmax(x, axis=-1):
    return LogSoftmax.apply(x, axis=axis)


def softmax_logsoftmax(x, axis=-1, log=False):
    return log_softmax(x, axis) if log else softmax(x, axis)


def layer_norm(x, gamma, beta, eps=1e-5):
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def embedding(table, ids):
    return Embedding.apply(table, ids=ids)


def pick(x, index):
    return Pick.apply(x, index=index)


def conv1d(x, kernel, stride=1):
    return Conv1d.apply(x, kernel, stride=stride)


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else y + bias


def constant_mask(mask, shape) -> Tensor:
    """Broadcast a 0/1 mask to ``shape`` as a constant tensor (numpy rules)."""
    return Tensor._wrap(np.broadcast_to(np.asarray(mask, dtype=np.float64), shape))


NEG_INF = -1e30


def attention(q, k, v, mask=None):
    """softmax(q kᵀ / √d + mask) v over the last two axes.

    ``mask`` is boolean with True for keys that may be attended; it must have
    shape [U, T] (optionally with leading extents broadcastable to the scores).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise DimensionError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        u, t = scores.shape[-2:]
        if mask.ndim < 2 or mask.shape[-2:] not in ((u, t), (1, t)):
            raise DimensionError(f"attention mask shape {mask.shape} does not match scores {u}x{t}")
        try:
            bias = np.broadcast_to(np.where(mask, 0.0, NEG_INF), scores.shape)
        except ValueError:
            raise DimensionError(f"attention mask shape {mask.shape} does not match scores {scores.shape}") from None
        scores = scores + Tensor._wrap(bias)
    return matmul(softmax(scores, -1), v)
