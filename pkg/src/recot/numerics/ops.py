"""Differentiable kernels over the tape.

Every op validates operand shapes, computes the forward value with numpy and,
when gradients are live, attaches a closure that accumulates vjps into its
parents.  Broadcasting is supported for elementwise arithmetic; gradients are
summed back down to the operand shape.
"""
from __future__ import annotations

import numpy as np

from .tensor import Node, NonFiniteError, ShapeError, Tensor, lift, needs_grad

__all__ = [
    "add", "sub", "mul", "div", "neg", "matmul", "bmm", "bmm_nt",
    "transpose2d", "reshape", "narrow", "cat_rows", "split_heads", "merge_heads",
    "sigmoid", "relu", "exp", "log", "abs_", "maximum", "minimum", "clip",
    "softmax", "sum_", "mean_", "reduce_max", "layer_norm", "linear",
    "conv2d", "avg_pool2d", "resize_bilinear",
]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _out(arr: np.ndarray, context: str) -> Node:
    return Node(Tensor(arr, context=context))


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    out = a.array + b.array
    if not needs_grad(a, b):
        return _out(out, "add")

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return Node(Tensor(out, context="add"), (a, b), bw, True)


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    out = a.array - b.array
    if not needs_grad(a, b):
        return _out(out, "sub")

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    return Node(Tensor(out, context="sub"), (a, b), bw, True)


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.array, b.array
    out = av * bv
    if not needs_grad(a, b):
        return _out(out, "mul")

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * bv, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * av, b.shape))

    return Node(Tensor(out, context="mul"), (a, b), bw, True)


def div(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.array, b.array
    out = av / bv
    if not needs_grad(a, b):
        return _out(out, "div")

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / bv, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * av / (bv * bv), b.shape))

    return Node(Tensor(out, context="div"), (a, b), bw, True)


def neg(a) -> Node:
    a = lift(a)
    out = -a.array
    if not needs_grad(a):
        return _out(out, "neg")

    def bw(g):
        a.accumulate(-g)

    return Node(Tensor(out, context="neg"), (a,), bw, True)


# ------------------------------------------------------------------- matmul

def matmul(a, b) -> Node:
    """2-D matrix product: (n x k) @ (k x m) -> (n x m)."""
    a, b = lift(a), lift(b)
    av, bv = a.array, b.array
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul expects (n,k)@(k,m), got {av.shape} @ {bv.shape}")
    out = av @ bv
    if not needs_grad(a, b):
        return _out(out, "matmul")

    def bw(g):
        if a.requires_grad:
            a.accumulate(g @ bv.T)
        if b.requires_grad:
            b.accumulate(av.T @ g)

    return Node(Tensor(out, context="matmul"), (a, b), bw, True)


def bmm(a, b) -> Node:
    """Batched matmul: (h, n, k) @ (h, k, m) -> (h, n, m)."""
    a, b = lift(a), lift(b)
    av, bv = a.array, b.array
    if av.ndim != 3 or bv.ndim != 3 or av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
        raise ShapeError(f"bmm expects (h,n,k)@(h,k,m), got {av.shape} @ {bv.shape}")
    out = np.matmul(av, bv)
    if not needs_grad(a, b):
        return _out(out, "bmm")

    def bw(g):
        if a.requires_grad:
            a.accumulate(np.matmul(g, bv.transpose(0, 2, 1)))
        if b.requires_grad:
            b.accumulate(np.matmul(av.transpose(0, 2, 1), g))

    return Node(Tensor(out, context="bmm"), (a, b), bw, True)


def bmm_nt(a, b) -> Node:
    """Batched product against transposed last two axes: (h,n,d)@(h,m,d)^T -> (h,n,m)."""
    a, b = lift(a), lift(b)
    av, bv = a.array, b.array
    if av.ndim != 3 or bv.ndim != 3 or av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[2]:
        raise ShapeError(f"bmm_nt expects (h,n,d) x (h,m,d), got {av.shape} x {bv.shape}")
    out = np.matmul(av, bv.transpose(0, 2, 1))
    if not needs_grad(a, b):
        return _out(out, "bmm_nt")

    def bw(g):
        if a.requires_grad:
            a.accumulate(np.matmul(g, bv))
        if b.requires_grad:
            b.accumulate(np.matmul(g.transpose(0, 2, 1), av))

    return Node(Tensor(out, context="bmm_nt"), (a, b), bw, True)


# ------------------------------------------------------------ shape movement

def transpose2d(x) -> Node:
    x = lift(x)
    if x.array.ndim != 2:
        raise ShapeError(f"transpose2d expects 2-D, got {x.shape}")
    out = np.ascontiguousarray(x.array.T)
    if not needs_grad(x):
        return _out(out, "transpose2d")

    def bw(g):
        x.accumulate(np.ascontiguousarray(g.T))

    return Node(Tensor(out, context="transpose2d"), (x,), bw, True)


def reshape(x, shape: tuple[int, ...]) -> Node:
    x = lift(x)
    out = x.array.reshape(shape)
    if not needs_grad(x):
        return _out(out, "reshape")

    in_shape = x.shape

    def bw(g):
        x.accumulate(g.reshape(in_shape))

    return Node(Tensor(out, context="reshape"), (x,), bw, True)


def narrow(x, axis: int, start: int, length: int) -> Node:
    """Contiguous slice along ``axis``."""
    x = lift(x)
    xv = x.array
    if start < 0 or length < 0 or start + length > xv.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}) outside axis {axis} of {x.shape}")
    index = [slice(None)] * xv.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = np.ascontiguousarray(xv[index])
    if not needs_grad(x):
        return _out(out, "narrow")

    def bw(g):
        full = np.zeros_like(xv)
        full[index] = g
        x.accumulate(full)

    return Node(Tensor(out, context="narrow"), (x,), bw, True)


def cat_rows(parts) -> Node:
    """Concatenate blocks along axis 0; trailing dims must agree."""
    parts = [lift(p) for p in parts]
    trailing = {p.shape[1:] for p in parts}
    if len(trailing) != 1:
        raise ShapeError(f"cat_rows needs equal trailing dims, got {[p.shape for p in parts]}")
    out = np.concatenate([p.array for p in parts], axis=0)
    if not needs_grad(*parts):
        return _out(out, "cat_rows")

    sizes = [p.shape[0] for p in parts]

    def bw(g):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p.accumulate(g[offset:offset + n])
            offset += n

    return Node(Tensor(out, context="cat_rows"), tuple(parts), bw, True)


def split_heads(x, heads: int) -> Node:
    """(L, c) -> (heads, L, c // heads)."""
    x = lift(x)
    length, c = x.shape
    if c % heads:
        raise ShapeError(f"channel count {c} not divisible by {heads} heads")
    d = c // heads
    out = np.ascontiguousarray(x.array.reshape(length, heads, d).transpose(1, 0, 2))
    if not needs_grad(x):
        return _out(out, "split_heads")

    def bw(g):
        x.accumulate(g.transpose(1, 0, 2).reshape(length, c))

    return Node(Tensor(out, context="split_heads"), (x,), bw, True)


def merge_heads(x) -> Node:
    """(heads, L, d) -> (L, heads * d)."""
    x = lift(x)
    heads, length, d = x.shape
    out = np.ascontiguousarray(x.array.transpose(1, 0, 2).reshape(length, heads * d))
    if not needs_grad(x):
        return _out(out, "merge_heads")

    def bw(g):
        x.accumulate(np.ascontiguousarray(g.reshape(length, heads, d).transpose(1, 0, 2)))

    return Node(Tensor(out, context="merge_heads"), (x,), bw, True)


# ------------------------------------------------------------ nonlinearities

def sigmoid(x) -> Node:
    x = lift(x)
    xv = x.array
    # Stable in both tails: never exponentiates a positive argument.
    z = np.exp(-np.abs(xv))
    out = np.where(xv >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    if not needs_grad(x):
        return _out(out, "sigmoid")

    def bw(g):
        x.accumulate(_sigmoid_backward(out, g))

    return Node(Tensor(out, context="sigmoid"), (x,), bw, True)


def _sigmoid_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    # Seam kept separate so tests can fault-inject a wrong rule.
    return g * y * (1.0 - y)


def relu(x) -> Node:
    x = lift(x)
    xv = x.array
    out = np.maximum(xv, 0.0)
    if not needs_grad(x):
        return _out(out, "relu")

    def bw(g):
        x.accumulate(g * (xv > 0))

    return Node(Tensor(out, context="relu"), (x,), bw, True)


def exp(x) -> Node:
    x = lift(x)
    out = np.exp(x.array)
    if not needs_grad(x):
        return _out(out, "exp")

    def bw(g):
        x.accumulate(g * out)

    return Node(Tensor(out, context="exp"), (x,), bw, True)


def log(x) -> Node:
    x = lift(x)
    xv = x.array
    if xv.min() <= 0:
        raise NonFiniteError("log of non-positive value")
    out = np.log(xv)
    if not needs_grad(x):
        return _out(out, "log")

    def bw(g):
        x.accumulate(g / xv)

    return Node(Tensor(out, context="log"), (x,), bw, True)


def abs_(x) -> Node:
    x = lift(x)
    xv = x.array
    out = np.abs(xv)
    if not needs_grad(x):
        return _out(out, "abs")

    def bw(g):
        x.accumulate(g * np.sign(xv))

    return Node(Tensor(out, context="abs"), (x,), bw, True)


def maximum(a, b) -> Node:
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = lift(a), lift(b)
    av, bv = a.array, b.array
    out = np.maximum(av, bv)
    if not needs_grad(a, b):
        return _out(out, "maximum")

    def bw(g):
        take_a = av >= bv
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * ~take_a, b.shape))

    return Node(Tensor(out, context="maximum"), (a, b), bw, True)


def minimum(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.array, b.array
    out = np.minimum(av, bv)
    if not needs_grad(a, b):
        return _out(out, "minimum")

    def bw(g):
        take_a = av <= bv
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * ~take_a, b.shape))

    return Node(Tensor(out, context="minimum"), (a, b), bw, True)


def clip(x, lo: float, hi: float) -> Node:
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    x = lift(x)
    xv = x.array
    out = np.clip(xv, lo, hi)
    if not needs_grad(x):
        return _out(out, "clip")

    def bw(g):
        x.accumulate(g * ((xv >= lo) & (xv <= hi)))

    return Node(Tensor(out, context="clip"), (x,), bw, True)


# ------------------------------------------------------------------ softmax

def softmax(x, axis: int = -1) -> Node:
    """Shift-invariant softmax along ``axis``; output rows sum to one."""
    x = lift(x)
    xv = x.array
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    if not needs_grad(x):
        return _out(out, "softmax")

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        x.accumulate((g - inner) * out)

    return Node(Tensor(out, context="softmax"), (x,), bw, True)


# --------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims: bool = False) -> Node:
    x = lift(x)
    xv = x.array
    out = xv.sum(axis=axis, keepdims=keepdims)
    if not needs_grad(x):
        return _out(out, "sum")

    def bw(g):
        if axis is None:
            x.accumulate(np.full(xv.shape, np.asarray(g).reshape(()), dtype=xv.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x.accumulate(np.broadcast_to(gg, xv.shape).copy())

    return Node(Tensor(out, context="sum"), (x,), bw, True)


def mean_(x, axis=None, keepdims: bool = False) -> Node:
    x = lift(x)
    xv = x.array
    out = xv.mean(axis=axis, keepdims=keepdims)
    count = xv.size if axis is None else xv.shape[axis]
    if not needs_grad(x):
        return _out(out, "mean")

    def bw(g):
        if axis is None:
            x.accumulate(np.full(xv.shape, g.reshape(()) / count, dtype=xv.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x.accumulate(np.broadcast_to(gg / count, xv.shape).copy())

    return Node(Tensor(out, context="mean"), (x,), bw, True)


def reduce_max(x, axis: int, keepdims: bool = False) -> Node:
    """Max along one axis; the gradient routes to the first argmax."""
    x = lift(x)
    xv = x.array
    idx = np.expand_dims(xv.argmax(axis=axis), axis)
    picked = np.take_along_axis(xv, idx, axis=axis)
    out = picked if keepdims else picked.squeeze(axis)
    if not needs_grad(x):
        return _out(out, "reduce_max")

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros_like(xv)
        np.put_along_axis(full, idx, gg, axis=axis)
        x.accumulate(full)

    return Node(Tensor(out, context="reduce_max"), (x,), bw, True)


# ------------------------------------------------------------------- layers

def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Node:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    x, gamma, beta = lift(x), lift(gamma), lift(beta)
    xv = x.array
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = xhat * gamma.array + beta.array
    if not needs_grad(x, gamma, beta):
        return _out(out, "layer_norm")

    def bw(g):
        if gamma.requires_grad:
            gamma.accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta.accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            dxhat = g * gamma.array
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate((dxhat - m1 - xhat * m2) * inv)

    return Node(Tensor(out, context="layer_norm"), (x, gamma, beta), bw, True)


def linear(x, w, b=None) -> Node:
    """Affine map on row vectors: (L, d_in) @ (d_in, d_out) + bias."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# ------------------------------------------------------------- convolutions

def conv2d(x, kernels, bias=None, stride: int = 1, pad: int = 0) -> Node:
    """Cross-correlation: x (C_in,H,W) with kernels (C_out,C_in,kh,kw).

    Output spatial size follows floor((H + 2*pad - kh) / stride) + 1.
    """
    x, kernels = lift(x), lift(kernels)
    xv, kv = x.array, kernels.array
    if xv.ndim != 3 or kv.ndim != 4 or kv.shape[1] != xv.shape[0]:
        raise ShapeError(f"conv2d expects (C,H,W) with (O,C,kh,kw), got {xv.shape}, {kv.shape}")
    c_out, c_in, kh, kw = kv.shape
    _, h, w = xv.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output would be empty for input {xv.shape}, kernel {kv.shape}")

    padded = np.pad(xv, ((0, 0), (pad, pad), (pad, pad))) if pad else xv
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]                     # (C, oh, ow, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2)).reshape(c_in * kh * kw, oh * ow)
    w2 = kv.reshape(c_out, c_in * kh * kw)
    out2 = w2 @ cols
    b = lift(bias) if bias is not None else None
    if b is not None:
        out2 = out2 + b.array.reshape(c_out, 1)
    out = out2.reshape(c_out, oh, ow)
    parents = (x, kernels) if b is None else (x, kernels, b)
    if not needs_grad(*parents):
        return _out(out, "conv2d")

    def bw(g):
        g2 = g.reshape(c_out, oh * ow)
        if b is not None and b.requires_grad:
            b.accumulate(g2.sum(axis=1).reshape(b.shape))
        if kernels.requires_grad:
            kernels.accumulate((g2 @ cols.T).reshape(kv.shape))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c_in, kh, kw, oh, ow)
            dpad = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=xv.dtype)
            for i in range(kh):
                for j in range(kw):
                    dpad[:, i:i + oh * stride:stride, j:j + ow * stride:stride] += dcols[:, i, j]
            x.accumulate(dpad[:, pad:pad + h, pad:pad + w] if pad else dpad)

    return Node(Tensor(out, context="conv2d"), parents, bw, True)


def avg_pool2d(x, k: int = 2) -> Node:
    """Non-overlapping k x k mean pooling over (C, H, W)."""
    x = lift(x)
    xv = x.array
    c, h, w = xv.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d needs H, W divisible by {k}, got {x.shape}")
    out = xv.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))
    if not needs_grad(x):
        return _out(out, "avg_pool2d")

    def bw(g):
        spread = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        x.accumulate(spread.astype(xv.dtype, copy=False))

    return Node(Tensor(out, context="avg_pool2d"), (x,), bw, True)


def _bilinear_axis(in_size: int, out_size: int):
    # Half-pixel (align_corners=False) source coordinates, clamped to the edge.
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(x, out_h: int, out_w: int) -> Node:
    """Bilinear resample of (C, H, W) rasters; constant inputs stay constant."""
    x = lift(x)
    xv = x.array
    if xv.ndim != 3:
        raise ShapeError(f"resize_bilinear expects (C,H,W), got {x.shape}")
    c, h, w = xv.shape
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]
    top = xv[:, y0][:, :, x0] * wx0 + xv[:, y0][:, :, x1] * wx1
    bot = xv[:, y1][:, :, x0] * wx0 + xv[:, y1][:, :, x1] * wx1
    out = (top * wy0 + bot * wy1).astype(xv.dtype, copy=False)
    if not needs_grad(x):
        return _out(out, "resize_bilinear")

    def bw(g):
        dx = np.zeros_like(xv)
        corners = (
            (y0, x0, wy0 * wx0), (y0, x1, wy0 * wx1),
            (y1, x0, wy1 * wx0), (y1, x1, wy1 * wx1),
        )
        for ys, xs, wgt in corners:
            contrib = (g * wgt).astype(xv.dtype, copy=False)
            np.add.at(dx, (slice(None), ys[:, None], xs[None, :]), contrib)
        x.accumulate(dx)

    return Node(Tensor(out, context="resize_bilinear"), (x,), bw, True)


# ------------------------------------------------------- operator overloads

def _wrap_binary(fn):
    def method(self, other):
        return fn(self, other)
    return method


def _wrap_rbinary(fn):
    def method(self, other):
        return fn(other, self)
    return method


Node.__add__ = _wrap_binary(add)
Node.__radd__ = _wrap_rbinary(add)
Node.__sub__ = _wrap_binary(sub)
Node.__rsub__ = _wrap_rbinary(sub)
Node.__mul__ = _wrap_binary(mul)
Node.__rmul__ = _wrap_rbinary(mul)
Node.__truediv__ = _wrap_binary(div)
Node.__rtruediv__ = _wrap_rbinary(div)
Node.__matmul__ = _wrap_binary(matmul)
Node.__neg__ = lambda self: neg(self)
